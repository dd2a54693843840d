#pragma once

// The action expert: learned action-query tokens cross-attend over the
// aligned multimodal tokens plus the (projected) dream tokens and emit an
// H-step action chunk. Both inference passes share these weights.

#include <string>
#include <vector>

#include "tacdream/common.hpp"
#include "tacdream/diffcore.hpp"
#include "tacdream/encoders.hpp"
#include "tacdream/forecaster.hpp"
#include "tacdream/nn.hpp"

namespace tacdream::policy {

using diffcore::Tensor;
using nn::FwdCtx;
using nn::ParamStore;

struct PolicyConfig {
    size_t depth = 3;
    size_t heads = 8;
    size_t dim = 128;
    size_t horizon = 8;  // H
    double dropout = 0.1;

    void validate() const {
        TD_CHECK(depth >= 1, "policy: depth must be >= 1");
        TD_CHECK(dim % heads == 0, "policy: dim not divisible by heads");
        TD_CHECK(horizon >= 1, "policy: horizon must be >= 1");
    }
};

// (1/H) * sum_j |pred_j - target_j|_1 over the chunk
template <typename T>
Tensor<T> action_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    TD_CHECK(pred.shape() == target.shape(), "action_loss: shape mismatch");
    const size_t H = pred.shape()[0];
    return diffcore::scale(diffcore::sum_all(diffcore::absval(diffcore::sub(pred, target))),
                           T(1) / T(H));
}

template <typename T>
class ActionExpert {
public:
    ActionExpert() = default;
    ActionExpert(ParamStore<T>& ps, const PolicyConfig& cfg, size_t dream_patches,
                 size_t dream_dim, Rng rng)
        : cfg_(cfg), dream_patches_(dream_patches) {
        cfg_.validate();
        const size_t d = cfg.dim;
        action_queries_ = ps.create("policy.queries", {cfg.horizon, d}, rng, 0.02);
        dream_proj_ = nn::Linear<T>(ps, "policy.dream_proj", dream_dim, d, rng);
        dream_pos_ = ps.create("policy.dream_pos", {dream_patches + 1, d}, rng, 0.02);
        for (size_t i = 0; i < cfg.depth; ++i)
            blocks_.emplace_back(ps, "policy.block" + std::to_string(i), d, cfg.heads, rng,
                                 cfg.dropout);
        ln_f_ = nn::LayerNorm<T>(ps, "policy.ln_f", d);
        head_ = nn::Linear<T>(ps, "policy.head", d, 7, rng);
    }

    // emits the chunk in normalized action units, [H x 7]
    Tensor<T> act(const encoders::TokenSequence<T>& h_align,
                  const forecaster::DreamEmbedding<T>& dream, const FwdCtx& ctx) const {
        TD_CHECK(dream.patches.defined() && dream.pooled.defined(),
                 "act: dream embedding is undefined");
        auto dream_tokens = diffcore::concat_rows<T>(
            {dream_proj_.forward(dream.pooled), dream_proj_.forward(dream.patches)});
        dream_tokens = add(dream_tokens, dream_pos_);
        auto context = diffcore::concat_rows<T>({h_align.tokens, dream_tokens});
        Tensor<T> q = action_queries_;
        for (const auto& b : blocks_) q = b.forward_cross(q, context, ctx);
        return head_.forward(ln_f_.forward(q));
    }

    const PolicyConfig& config() const { return cfg_; }

private:
    PolicyConfig cfg_;
    size_t dream_patches_ = 0;
    Tensor<T> action_queries_, dream_pos_;
    nn::Linear<T> dream_proj_;
    std::vector<nn::TransformerBlock<T>> blocks_;
    nn::LayerNorm<T> ln_f_;
    nn::Linear<T> head_;
};

} // namespace tacdream::policy
