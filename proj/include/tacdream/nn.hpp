#pragma once

// Layer modules over diffcore tensors. Parameters live in a ParamStore keyed
// by dotted names so checkpoints, param groups, and freeze checks all work
// from one registry.

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "tacdream/common.hpp"
#include "tacdream/diffcore.hpp"

namespace tacdream::nn {

using diffcore::Tensor;
using diffcore::Shape;

// forward-pass context: training flag plus the rng that feeds dropout masks
struct FwdCtx {
    bool training = false;
    Rng* rng = nullptr;
};

inline FwdCtx eval_ctx() { return FwdCtx{false, nullptr}; }

template <typename T>
class ParamStore {
public:
    Tensor<T> create(const std::string& name, Shape shape, Rng& rng, double stddev) {
        TD_CHECK(!params_.count(name), "duplicate parameter: " + name);
        Tensor<T> t = stddev == 0.0 ? Tensor<T>::zeros(shape, true)
                                    : Tensor<T>::randn(shape, rng, T(stddev), true);
        params_.emplace(name, t);
        return t;
    }

    Tensor<T> create_const(const std::string& name, Shape shape, T fill) {
        TD_CHECK(!params_.count(name), "duplicate parameter: " + name);
        Tensor<T> t = Tensor<T>::full(shape, fill, true);
        params_.emplace(name, t);
        return t;
    }

    // non-trainable named buffer (normalization stats and the like); saved
    // and loaded with the checkpoint but never handed to an optimizer
    Tensor<T> create_buffer(const std::string& name, Shape shape, T fill = T(0)) {
        TD_CHECK(!params_.count(name), "duplicate parameter: " + name);
        Tensor<T> t = Tensor<T>::full(shape, fill, false);
        params_.emplace(name, t);
        return t;
    }

    Tensor<T> get(const std::string& name) const {
        auto it = params_.find(name);
        TD_CHECK(it != params_.end(), "unknown parameter: " + name);
        return it->second;
    }

    bool has(const std::string& name) const { return params_.count(name) > 0; }

    // name-ordered (std::map) so every consumer sees a stable order
    std::vector<Tensor<T>> all() const {
        std::vector<Tensor<T>> out;
        for (const auto& [k, v] : params_) out.push_back(v);
        return out;
    }

    std::vector<Tensor<T>> with_prefix(const std::string& prefix) const {
        std::vector<Tensor<T>> out;
        for (const auto& [k, v] : params_)
            if (k.rfind(prefix, 0) == 0) out.push_back(v);
        return out;
    }

    std::vector<Tensor<T>> trainable() const {
        std::vector<Tensor<T>> out;
        for (const auto& [k, v] : params_)
            if (v.requires_grad()) out.push_back(v);
        return out;
    }

    std::vector<std::pair<std::string, Tensor<T>>> named() const {
        return {params_.begin(), params_.end()};
    }

    void set_requires_grad(const std::string& prefix, bool value) {
        for (auto& [k, v] : params_)
            if (k.rfind(prefix, 0) == 0) v.node()->requires_grad = value;
    }

    size_t count_with_prefix(const std::string& prefix) const {
        size_t n = 0;
        for (const auto& [k, v] : params_)
            if (k.rfind(prefix, 0) == 0) n += v.numel();
        return n;
    }

    size_t total_scalars() const {
        size_t n = 0;
        for (const auto& [k, v] : params_) n += v.numel();
        return n;
    }

    uint64_t content_hash(const std::string& prefix = "") const {
        uint64_t h = 0xCBF29CE484222325ULL;
        auto mix_bytes = [&h](const void* p, size_t len) {
            const unsigned char* b = static_cast<const unsigned char*>(p);
            for (size_t i = 0; i < len; ++i) {
                h ^= b[i];
                h *= 0x100000001B3ULL;
            }
        };
        for (const auto& [k, v] : params_) {
            if (!prefix.empty() && k.rfind(prefix, 0) != 0) continue;
            mix_bytes(k.data(), k.size());
            for (const T& x : v.value()) {
                const float f = float(x);
                mix_bytes(&f, sizeof(float));
            }
        }
        return h;
    }

    void save(const std::string& path) const {
        std::vector<diffcore::NamedBuffer> bufs;
        for (const auto& [k, v] : params_) {
            diffcore::NamedBuffer b;
            b.name = k;
            b.shape = v.shape();
            b.data.reserve(v.numel());
            for (const T& x : v.value()) b.data.push_back(float(x));
            bufs.push_back(std::move(b));
        }
        diffcore::save_dtwt(path, bufs);
    }

    // strict by default: every record must match an existing parameter
    void load(const std::string& path, bool allow_extra = false) {
        auto bufs = diffcore::load_dtwt(path);
        for (const auto& b : bufs) {
            auto it = params_.find(b.name);
            if (it == params_.end()) {
                TD_CHECK(allow_extra, "checkpoint has unknown parameter: " + b.name);
                continue;
            }
            TD_CHECK(it->second.shape() == b.shape,
                     "checkpoint shape mismatch for " + b.name + ": expected " +
                         diffcore::shape_str(it->second.shape()) + " got " +
                         diffcore::shape_str(b.shape));
            auto& val = it->second.value();
            for (size_t i = 0; i < val.size(); ++i) val[i] = T(b.data[i]);
        }
    }

private:
    std::map<std::string, Tensor<T>> params_;
};

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

template <typename T>
class Linear {
public:
    Linear() = default;
    Linear(ParamStore<T>& ps, const std::string& name, size_t in, size_t out, Rng& rng,
           double stddev = 0.02)
        : w_(ps.create(name + ".w", {in, out}, rng, stddev)),
          b_(ps.create(name + ".b", {out}, rng, 0.0)) {}

    Tensor<T> forward(const Tensor<T>& x) const { return diffcore::add_row(diffcore::matmul(x, w_), b_); }

    Tensor<T> weight() const { return w_; }
    Tensor<T> bias() const { return b_; }

private:
    Tensor<T> w_, b_;
};

template <typename T>
class LayerNorm {
public:
    LayerNorm() = default;
    LayerNorm(ParamStore<T>& ps, const std::string& name, size_t dim)
        : g_(ps.create_const(name + ".g", {dim}, T(1))),
          b_(ps.create_const(name + ".b", {dim}, T(0))) {}

    Tensor<T> forward(const Tensor<T>& x) const { return diffcore::layernorm_rows(x, g_, b_); }

private:
    Tensor<T> g_, b_;
};

template <typename T>
class MultiHeadAttention {
public:
    MultiHeadAttention() = default;
    MultiHeadAttention(ParamStore<T>& ps, const std::string& name, size_t dim, size_t heads,
                       Rng& rng)
        : heads_(heads), dim_(dim),
          wq_(ps, name + ".q", dim, dim, rng),
          wk_(ps, name + ".k", dim, dim, rng),
          wv_(ps, name + ".v", dim, dim, rng),
          wo_(ps, name + ".o", dim, dim, rng) {
        TD_CHECK(dim % heads == 0, "attention: dim not divisible by heads");
    }

    Tensor<T> forward(const Tensor<T>& q_tokens, const Tensor<T>& kv_tokens) const {
        const size_t dh = dim_ / heads_;
        auto q = wq_.forward(q_tokens);
        auto k = wk_.forward(kv_tokens);
        auto v = wv_.forward(kv_tokens);
        const T inv_sqrt = T(1.0 / std::sqrt(double(dh)));
        std::vector<Tensor<T>> head_outs;
        head_outs.reserve(heads_);
        for (size_t h = 0; h < heads_; ++h) {
            auto qh = diffcore::slice_cols(q, h * dh, (h + 1) * dh);
            auto kh = diffcore::slice_cols(k, h * dh, (h + 1) * dh);
            auto vh = diffcore::slice_cols(v, h * dh, (h + 1) * dh);
            auto scores = diffcore::scale(diffcore::matmul_nt(qh, kh), inv_sqrt);
            auto attn = diffcore::softmax_rows(scores);
            head_outs.push_back(diffcore::matmul(attn, vh));
        }
        return wo_.forward(diffcore::concat_cols(head_outs));
    }

private:
    size_t heads_ = 0, dim_ = 0;
    Linear<T> wq_, wk_, wv_, wo_;
};

// pre-LN transformer block: x + attn(ln(x)), then x + mlp(ln(x))
template <typename T>
class TransformerBlock {
public:
    TransformerBlock() = default;
    TransformerBlock(ParamStore<T>& ps, const std::string& name, size_t dim, size_t heads,
                     Rng& rng, double dropout_p = 0.1, size_t mlp_ratio = 4)
        : dropout_p_(dropout_p),
          ln1_(ps, name + ".ln1", dim),
          ln2_(ps, name + ".ln2", dim),
          attn_(ps, name + ".attn", dim, heads, rng),
          fc1_(ps, name + ".fc1", dim, dim * mlp_ratio, rng),
          fc2_(ps, name + ".fc2", dim * mlp_ratio, dim, rng) {}

    Tensor<T> forward(const Tensor<T>& x, const FwdCtx& ctx) const {
        auto normed = ln1_.forward(x);
        auto h = diffcore::add(x, maybe_dropout(attn_.forward(normed, normed), ctx));
        auto m = fc2_.forward(diffcore::gelu(fc1_.forward(ln2_.forward(h))));
        return diffcore::add(h, maybe_dropout(m, ctx));
    }

    // queries attend over [context ; queries]; context tokens are read-only
    Tensor<T> forward_cross(const Tensor<T>& queries, const Tensor<T>& context,
                            const FwdCtx& ctx) const {
        auto qn = ln1_.forward(queries);
        auto kv = diffcore::concat_rows<T>({context, qn});
        auto h = diffcore::add(queries, maybe_dropout(attn_.forward(qn, kv), ctx));
        auto m = fc2_.forward(diffcore::gelu(fc1_.forward(ln2_.forward(h))));
        return diffcore::add(h, maybe_dropout(m, ctx));
    }

private:
    Tensor<T> maybe_dropout(const Tensor<T>& x, const FwdCtx& ctx) const {
        if (!ctx.training || dropout_p_ == 0.0) return x;
        TD_CHECK(ctx.rng != nullptr, "training forward needs an rng");
        return diffcore::dropout(x, dropout_p_, true, *ctx.rng);
    }

    double dropout_p_ = 0.0;
    LayerNorm<T> ln1_, ln2_;
    MultiHeadAttention<T> attn_;
    Linear<T> fc1_, fc2_;
};

// single learned query attends over tokens through k/v/o projections; the
// query is stored directly in projected space, so there is no q projection
template <typename T>
class AttentionPool {
public:
    AttentionPool() = default;
    AttentionPool(ParamStore<T>& ps, const std::string& name, size_t dim, size_t heads, Rng& rng)
        : heads_(heads), dim_(dim),
          query_(ps.create(name + ".query", {1, dim}, rng, 0.02)),
          wk_(ps, name + ".k", dim, dim, rng),
          wv_(ps, name + ".v", dim, dim, rng),
          wo_(ps, name + ".o", dim, dim, rng) {
        TD_CHECK(dim % heads == 0, "attention pool: dim not divisible by heads");
    }

    Tensor<T> forward(const Tensor<T>& tokens) const {
        const size_t dh = dim_ / heads_;
        auto k = wk_.forward(tokens);
        auto v = wv_.forward(tokens);
        const T inv_sqrt = T(1.0 / std::sqrt(double(dh)));
        std::vector<Tensor<T>> head_outs;
        head_outs.reserve(heads_);
        for (size_t h = 0; h < heads_; ++h) {
            auto qh = diffcore::slice_cols(query_, h * dh, (h + 1) * dh);
            auto kh = diffcore::slice_cols(k, h * dh, (h + 1) * dh);
            auto vh = diffcore::slice_cols(v, h * dh, (h + 1) * dh);
            auto scores = diffcore::scale(diffcore::matmul_nt(qh, kh), inv_sqrt);
            auto attn = diffcore::softmax_rows(scores);
            head_outs.push_back(diffcore::matmul(attn, vh));
        }
        return wo_.forward(diffcore::concat_cols(head_outs));
    }

private:
    size_t heads_ = 0, dim_ = 0;
    Tensor<T> query_;
    Linear<T> wk_, wv_, wo_;
};

} // namespace tacdream::nn
