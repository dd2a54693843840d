#pragma once

// Modality encoders and the unified token sequence: patch-embedded images,
// an MLP state token, and a learned prompt token, run through one shared
// transformer. Exposes the intermediate stream (for spatial alignment) and
// the final aligned stream (for the policy).

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tacdream/common.hpp"
#include "tacdream/diffcore.hpp"
#include "tacdream/nn.hpp"

namespace tacdream::encoders {

using diffcore::Tensor;
using nn::FwdCtx;
using nn::ParamStore;

enum class Modality { tpv = 0, wrist = 1, tactile = 2, state = 3, prompt = 4 };

inline const char* modality_name(Modality m) {
    switch (m) {
        case Modality::tpv: return "tpv";
        case Modality::wrist: return "wrist";
        case Modality::tactile: return "tactile";
        case Modality::state: return "state";
        case Modality::prompt: return "prompt";
    }
    return "?";
}

struct EncoderConfig {
    size_t token_dim = 128;
    size_t depth = 4;
    size_t heads = 8;
    size_t mid_layer = 2;  // H_mid is the stream after this block (1-based)
    size_t patch_px = 8;
    size_t img_size = 64;
    size_t tac_size = 32;
    size_t num_tasks = 2;
    double dropout = 0.1;

    size_t img_grid() const { return img_size / patch_px; }
    size_t tac_grid() const { return tac_size / patch_px; }
    size_t img_tokens() const { return img_grid() * img_grid(); }
    size_t tac_tokens() const { return tac_grid() * tac_grid(); }
    size_t total_tokens() const { return 2 + 2 * img_tokens() + tac_tokens(); }

    void validate() const {
        TD_CHECK(img_size % patch_px == 0 && tac_size % patch_px == 0,
                 "encoder: image size must be divisible by the patch size");
        TD_CHECK(mid_layer >= 1 && mid_layer < depth,
                 "encoder: mid_layer must satisfy 1 <= mid < depth");
        TD_CHECK(token_dim % heads == 0, "encoder: token_dim not divisible by heads");
    }
};

template <typename T>
struct TokenSequence {
    Tensor<T> tokens;                             // [L x D]
    std::vector<Modality> tags;                   // per token
    std::vector<std::pair<int, int>> grid;        // (row, col), (-1,-1) for non-image

    size_t count(Modality m) const {
        size_t n = 0;
        for (Modality t : tags) n += (t == m);
        return n;
    }

    // token indices of one modality, in row-major grid order
    std::vector<size_t> indices_of(Modality m) const {
        std::vector<size_t> out;
        for (size_t i = 0; i < tags.size(); ++i)
            if (tags[i] == m) out.push_back(i);
        return out;
    }
};

struct EncoderInput {
    const float* tpv = nullptr;      // img*img*3
    const float* wrist = nullptr;    // img*img*3
    const float* tactile = nullptr;  // tac*tac*3
    std::array<float, 7> proprio = {};  // already normalized by the caller
    int prompt_id = 0;
};

template <typename T>
class MultimodalEncoder {
public:
    MultimodalEncoder(ParamStore<T>& ps, const EncoderConfig& cfg, Rng rng)
        : cfg_(cfg), ps_(&ps) {
        cfg_.validate();
        const size_t d = cfg_.token_dim;
        const size_t patch_in = cfg_.patch_px * cfg_.patch_px * 3;
        patch_tpv_ = nn::Linear<T>(ps, "enc.patch.tpv", patch_in, d, rng);
        patch_wrist_ = nn::Linear<T>(ps, "enc.patch.wrist", patch_in, d, rng);
        patch_tac_ = nn::Linear<T>(ps, "enc.patch.tactile", patch_in, d, rng);
        pos_tpv_ = ps.create("enc.pos.tpv", {cfg_.img_tokens(), d}, rng, 0.02);
        pos_wrist_ = ps.create("enc.pos.wrist", {cfg_.img_tokens(), d}, rng, 0.02);
        pos_tac_ = ps.create("enc.pos.tactile", {cfg_.tac_tokens(), d}, rng, 0.02);
        modality_emb_ = ps.create("enc.modality", {5, d}, rng, 0.02);
        prompt_emb_ = ps.create("enc.prompt", {cfg_.num_tasks, d}, rng, 0.02);
        state_proj_ = nn::Linear<T>(ps, "enc.state", 7, d, rng);
        blocks_.reserve(cfg_.depth);
        for (size_t i = 0; i < cfg_.depth; ++i)
            blocks_.emplace_back(ps, "enc.block" + std::to_string(i), d, cfg_.heads, rng,
                                 cfg_.dropout);
        ln_f_ = nn::LayerNorm<T>(ps, "enc.ln_f", d);
    }

    const EncoderConfig& config() const { return cfg_; }

    // raw linear patch embedding, exposed for the equivariance test
    Tensor<T> patch_embed_only(const float* img, Modality view) const {
        return linear_for(view).forward(patches_tensor(img, view));
    }

    TokenSequence<T> tokenize_image(const float* img, Modality view) const {
        TokenSequence<T> seq;
        auto emb = linear_for(view).forward(patches_tensor(img, view));
        emb = add(emb, pos_for(view));
        auto mod_row = diffcore::rows_select(modality_emb_, {size_t(view)});
        seq.tokens = diffcore::add_row(emb, diffcore::reshape(mod_row, {cfg_.token_dim}));
        const size_t g = view == Modality::tactile ? cfg_.tac_grid() : cfg_.img_grid();
        for (size_t r = 0; r < g; ++r)
            for (size_t c = 0; c < g; ++c) {
                seq.tags.push_back(view);
                seq.grid.emplace_back(int(r), int(c));
            }
        return seq;
    }

    // returns (H_mid, H_align); token order is [prompt, state, tpv, wrist, tactile]
    std::pair<TokenSequence<T>, TokenSequence<T>> encode(const EncoderInput& in,
                                                         const FwdCtx& ctx) const {
        TD_CHECK(in.prompt_id >= 0 && size_t(in.prompt_id) < cfg_.num_tasks,
                 "encode: prompt id out of range");
        const size_t d = cfg_.token_dim;

        auto prompt_tok = diffcore::add_row(
            diffcore::rows_select(prompt_emb_, {size_t(in.prompt_id)}),
            diffcore::reshape(diffcore::rows_select(modality_emb_, {size_t(Modality::prompt)}),
                              {d}));
        std::vector<T> pvec(in.proprio.begin(), in.proprio.end());
        auto state_tok = diffcore::add_row(
            state_proj_.forward(Tensor<T>::from_data({1, 7}, pvec)),
            diffcore::reshape(diffcore::rows_select(modality_emb_, {size_t(Modality::state)}),
                              {d}));

        TokenSequence<T> tpv_seq = tokenize_image(in.tpv, Modality::tpv);
        TokenSequence<T> wrist_seq = tokenize_image(in.wrist, Modality::wrist);
        TokenSequence<T> tac_seq = tokenize_image(in.tactile, Modality::tactile);

        TokenSequence<T> base;
        base.tokens = diffcore::concat_rows<T>(
            {prompt_tok, state_tok, tpv_seq.tokens, wrist_seq.tokens, tac_seq.tokens});
        base.tags = {Modality::prompt, Modality::state};
        base.grid = {{-1, -1}, {-1, -1}};
        auto append_meta = [&base](const TokenSequence<T>& s) {
            base.tags.insert(base.tags.end(), s.tags.begin(), s.tags.end());
            base.grid.insert(base.grid.end(), s.grid.begin(), s.grid.end());
        };
        append_meta(tpv_seq);
        append_meta(wrist_seq);
        append_meta(tac_seq);

        Tensor<T> x = base.tokens;
        Tensor<T> mid;
        for (size_t i = 0; i < cfg_.depth; ++i) {
            x = blocks_[i].forward(x, ctx);
            if (i + 1 == cfg_.mid_layer) mid = x;
        }
        TokenSequence<T> h_mid = base;
        h_mid.tokens = mid;
        TokenSequence<T> h_align = base;
        h_align.tokens = ln_f_.forward(x);
        return {h_mid, h_align};
    }

    // mean of the selected tokens of one modality, L2-normalized. The mask is
    // over the modality's tokens in row-major grid order; pass an empty mask
    // to select all of them. Empty selections are an error for tactile and an
    // absent value for image views (the alignment term is skipped).
    static std::optional<Tensor<T>> pool_region(const TokenSequence<T>& seq, Modality tag,
                                                const std::vector<bool>& mask) {
        const auto ids = seq.indices_of(tag);
        TD_CHECK(!ids.empty(), "pool_region: sequence has no tokens of tag " +
                                   std::string(modality_name(tag)));
        std::vector<size_t> selected;
        if (mask.empty()) {
            selected = ids;
        } else {
            TD_CHECK(mask.size() == ids.size(), "pool_region: mask does not match token grid");
            for (size_t i = 0; i < ids.size(); ++i)
                if (mask[i]) selected.push_back(ids[i]);
        }
        if (selected.empty()) {
            TD_CHECK(tag != Modality::tactile, "pool_region: empty tactile selection");
            return std::nullopt;
        }
        auto mean = diffcore::mean_rows(diffcore::rows_select(seq.tokens, selected));
        return diffcore::l2_normalize_rows(mean);
    }

private:
    const nn::Linear<T>& linear_for(Modality view) const {
        switch (view) {
            case Modality::tpv: return patch_tpv_;
            case Modality::wrist: return patch_wrist_;
            case Modality::tactile: return patch_tac_;
            default: TD_CHECK(false, "tokenize_image: not an image modality");
        }
        return patch_tpv_;
    }

    Tensor<T> pos_for(Modality view) const {
        switch (view) {
            case Modality::tpv: return pos_tpv_;
            case Modality::wrist: return pos_wrist_;
            default: return pos_tac_;
        }
    }

    // unfold [S,S,3] pixels into per-patch rows
    Tensor<T> patches_tensor(const float* img, Modality view) const {
        const size_t s = view == Modality::tactile ? cfg_.tac_size : cfg_.img_size;
        const size_t p = cfg_.patch_px;
        const size_t g = s / p;
        std::vector<T> data;
        data.reserve(g * g * p * p * 3);
        for (size_t pr = 0; pr < g; ++pr)
            for (size_t pc = 0; pc < g; ++pc)
                for (size_t r = 0; r < p; ++r)
                    for (size_t c = 0; c < p; ++c) {
                        const size_t px = (pr * p + r) * s + pc * p + c;
                        data.push_back(T(img[px * 3 + 0]));
                        data.push_back(T(img[px * 3 + 1]));
                        data.push_back(T(img[px * 3 + 2]));
                    }
        return Tensor<T>::from_data({g * g, p * p * 3}, std::move(data));
    }

    EncoderConfig cfg_;
    ParamStore<T>* ps_;
    nn::Linear<T> patch_tpv_, patch_wrist_, patch_tac_, state_proj_;
    Tensor<T> pos_tpv_, pos_wrist_, pos_tac_, modality_emb_, prompt_emb_;
    std::vector<nn::TransformerBlock<T>> blocks_;
    nn::LayerNorm<T> ln_f_;
};

} // namespace tacdream::encoders
