#pragma once

// Frozen tactile world model: a small ViT over gel frames pretrained with a
// JEPA objective (context frames predict the EMA target encoder's embedding
// of a future frame, in normalized latent space), plus the residual adapter
// and attention pooling that adapt the frozen patch embeddings for the
// policy, and the heatmap export used to visualize predicted futures.

#include <cstdio>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "tacdream/common.hpp"
#include "tacdream/datastore.hpp"
#include "tacdream/diffcore.hpp"
#include "tacdream/nn.hpp"

namespace tacdream::worldmodel {

using diffcore::Tensor;
using nn::FwdCtx;
using nn::ParamStore;

struct WmConfig {
    size_t dim = 128;      // D_w
    size_t heads = 8;
    std::string size = "large";  // large: depth 4, small: depth 2
    size_t context = 4;    // frames fed to the predictor
    size_t horizon = 5;    // N, steps ahead of the last context frame
    double ema_decay = 0.996;
    size_t tac_size = 32;
    size_t patch_px = 8;
    size_t pred_depth = 2;

    size_t depth() const {
        if (size == "large") return 4;
        if (size == "small") return 2;
        TD_CHECK(false, "wm size must be 'small' or 'large'");
        return 0;
    }
    size_t grid() const { return tac_size / patch_px; }
    size_t patches() const { return grid() * grid(); }

    void validate() const {
        TD_CHECK(horizon >= 1, "wm horizon must be >= 1");
        TD_CHECK(ema_decay > 0 && ema_decay < 1, "wm ema decay must be in (0,1)");
        TD_CHECK(tac_size % patch_px == 0, "wm: frame size not divisible by patch");
        (void)depth();
    }
};

template <typename T>
struct LatentEmbedding {
    Tensor<T> patches;  // [P x D]
    Tensor<T> pooled;   // [1 x D], arithmetic mean of patches
};

template <typename T>
class WmFrameEncoder {
public:
    WmFrameEncoder() = default;
    WmFrameEncoder(ParamStore<T>& ps, const std::string& prefix, const WmConfig& cfg, Rng rng)
        : cfg_(cfg) {
        const size_t d = cfg.dim;
        const size_t patch_in = cfg.patch_px * cfg.patch_px * 3;
        patch_ = nn::Linear<T>(ps, prefix + ".patch", patch_in, d, rng);
        pos_ = ps.create(prefix + ".pos", {cfg.patches(), d}, rng, 0.02);
        for (size_t i = 0; i < cfg.depth(); ++i)
            blocks_.emplace_back(ps, prefix + ".block" + std::to_string(i), d, cfg.heads, rng,
                                 0.0);
        ln_f_ = nn::LayerNorm<T>(ps, prefix + ".ln_f", d);
    }

    Tensor<T> forward(const float* frame) const {
        auto x = add(patch_.forward(unfold(frame)), pos_);
        for (const auto& b : blocks_) x = b.forward(x, nn::eval_ctx());
        return ln_f_.forward(x);
    }

private:
    Tensor<T> unfold(const float* img) const {
        const size_t s = cfg_.tac_size, p = cfg_.patch_px, g = cfg_.grid();
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

    WmConfig cfg_;
    nn::Linear<T> patch_;
    Tensor<T> pos_;
    std::vector<nn::TransformerBlock<T>> blocks_;
    nn::LayerNorm<T> ln_f_;
};

struct WmPretrainConfig {
    size_t steps = 1200;
    size_t batch = 32;
    double lr = 3e-4;
    double weight_decay = 1e-4;
    uint64_t seed = 0;
    bool shuffle_targets = false;  // control experiment: random target frames
    size_t log_every = 50;
    // variance floor on the online embeddings; the EMA target alone does not
    // stop representation collapse at this scale
    double var_floor = 0.3;
    double var_weight = 10.0;
};

struct WmPretrainResult {
    double first_loss = 0, final_loss = 0;
    double final_embed_std = 0;
    std::vector<std::pair<size_t, double>> loss_log;
};

template <typename T>
class TactileWorldModel {
public:
    TactileWorldModel(ParamStore<T>& ps, const WmConfig& cfg, Rng rng) : cfg_(cfg), ps_(&ps) {
        cfg_.validate();
        online_ = WmFrameEncoder<T>(ps, "wm.enc", cfg_, rng.split(1));
        target_ = WmFrameEncoder<T>(ps, "wm.ema", cfg_, rng.split(2));
        const size_t d = cfg_.dim;
        temporal_ = ps.create("wm.pred.temporal", {cfg_.context, d}, rng, 0.02);
        for (size_t i = 0; i < cfg_.pred_depth; ++i)
            pred_blocks_.emplace_back(ps, "wm.pred.block" + std::to_string(i), d, cfg_.heads,
                                      rng, 0.0);
        queries_ = ps.create("wm.pred.queries", {cfg_.patches(), d}, rng, 0.02);
        query_block_ = nn::TransformerBlock<T>(ps, "wm.pred.qblock", d, cfg_.heads, rng, 0.0);
        head_ = nn::Linear<T>(ps, "wm.pred.head", d, d, rng);
        copy_online_to_target();
    }

    const WmConfig& config() const { return cfg_; }

    // frozen embedding path: always grad-free, deterministic
    LatentEmbedding<T> embed(const float* frame) const {
        diffcore::NoGrad ng;
        LatentEmbedding<T> out;
        out.patches = online_.forward(frame);
        out.pooled = diffcore::mean_rows(out.patches);
        return out;
    }

    struct PredictOut {
        Tensor<T> pred;             // [P x D]
        Tensor<T> last_ctx_pooled;  // [1 x D], pooled online embedding of frame t
    };

    // predictor over k context frames; used during pretraining
    PredictOut predict_future_ctx(const std::vector<const float*>& context_frames) {
        TD_CHECK(context_frames.size() == cfg_.context, "wm: wrong context length");
        std::vector<Tensor<T>> frame_tokens;
        for (size_t f = 0; f < cfg_.context; ++f) {
            auto tok = online_.forward(context_frames[f]);
            auto temp_row = diffcore::rows_select(temporal_, {f});
            frame_tokens.push_back(
                diffcore::add_row(tok, diffcore::reshape(temp_row, {cfg_.dim})));
        }
        PredictOut out;
        out.last_ctx_pooled = diffcore::mean_rows(frame_tokens.back());
        auto ctx_tokens = diffcore::concat_rows(frame_tokens);
        for (const auto& b : pred_blocks_) ctx_tokens = b.forward(ctx_tokens, nn::eval_ctx());
        auto q = query_block_.forward_cross(queries_, ctx_tokens, nn::eval_ctx());
        out.pred = head_.forward(q);  // [P x D]
        return out;
    }

    Tensor<T> predict_future(const std::vector<const float*>& context_frames) {
        return predict_future_ctx(context_frames).pred;
    }

    Tensor<T> target_embedding(const float* frame) const {
        diffcore::NoGrad ng;
        return diffcore::l2_normalize_rows(target_.forward(frame));
    }

    void ema_update() {
        const T d = T(cfg_.ema_decay);
        for (const auto& [name, online] : ps_->named()) {
            if (name.rfind("wm.enc", 0) != 0) continue;
            const std::string tname = "wm.ema" + name.substr(6);
            auto tgt = ps_->get(tname);
            auto& tv = tgt.value();
            const auto& ov = online.value();
            for (size_t i = 0; i < tv.size(); ++i) tv[i] = d * tv[i] + (T(1) - d) * ov[i];
        }
    }

    void copy_online_to_target() {
        for (const auto& [name, online] : ps_->named()) {
            if (name.rfind("wm.enc", 0) != 0) continue;
            ps_->get("wm.ema" + name.substr(6)).value() = online.value();
        }
    }

    void freeze() {
        ps_->set_requires_grad("wm.", false);
        frozen_ = true;
    }
    bool frozen() const { return frozen_; }

    // JEPA pretraining over tactile sequences from the dataset episodes
    WmPretrainResult pretrain(const datastore::Dataset& ds, const std::vector<size_t>& episodes,
                              const WmPretrainConfig& pc, std::ostream* log = nullptr) {
        const size_t k = cfg_.context, n_ahead = cfg_.horizon;
        std::vector<std::pair<size_t, size_t>> pairs;  // (episode, t of last context frame)
        for (size_t ei : episodes) {
            const auto& ep = ds.episode(ei);
            if (ep.length < k + n_ahead) continue;
            for (size_t t = k - 1; t + n_ahead < ep.length; ++t) pairs.emplace_back(ei, t);
        }
        TD_CHECK(!pairs.empty(),
                 "wm pretrain: no episode is long enough for context+horizon sampling");

        std::vector<Tensor<T>> train_params;
        for (const auto& [name, p] : ps_->named())
            if (name.rfind("wm.enc", 0) == 0 || name.rfind("wm.pred", 0) == 0)
                train_params.push_back(p);
        diffcore::AdamW<T> opt(train_params, T(pc.lr), T(pc.weight_decay));

        WmPretrainResult res;
        for (size_t step = 0; step < pc.steps; ++step) {
            Rng rng = Rng(pc.seed).split(0x33D1u).split(step);
            Tensor<T> mse;
            std::vector<Tensor<T>> pooled_rows;
            for (size_t b = 0; b < pc.batch; ++b) {
                const auto& [ei, t] = pairs[rng.uniform_int(pairs.size())];
                const auto& ep = ds.episode(ei);
                std::vector<const float*> ctx_frames;
                for (size_t f = t + 1 - k; f <= t; ++f) ctx_frames.push_back(ep.tactile_frame(f));
                size_t tf = t + n_ahead;
                if (pc.shuffle_targets) tf = rng.uniform_int(ep.length);
                auto out = predict_future_ctx(ctx_frames);
                auto pred = diffcore::l2_normalize_rows(out.pred);
                auto target = target_embedding(ep.tactile_frame(tf));
                auto diff = diffcore::sub(pred, target);
                auto l = diffcore::mean_all(diffcore::mul(diff, diff));
                mse = mse.defined() ? diffcore::add(mse, l) : l;
                pooled_rows.push_back(out.last_ctx_pooled);
            }
            mse = diffcore::scale(mse, T(1) / T(pc.batch));

            // hinge on the per-dim std of the pooled online embeddings; the
            // 1/std gradient blows up exactly where collapse starts, which is
            // what keeps the representation spread out
            auto stack = diffcore::concat_rows(pooled_rows);
            auto mu = diffcore::mean_rows(stack);
            auto centered = diffcore::add_row(stack, diffcore::scale(mu, T(-1)));
            auto var = diffcore::mean_rows(diffcore::mul(centered, centered));
            auto stddev = diffcore::sqrt_eps(var, T(1e-8));
            auto deficit = diffcore::sub(Tensor<T>::full({1, cfg_.dim}, T(pc.var_floor)), stddev);
            auto hinge = diffcore::scale(diffcore::add(deficit, diffcore::absval(deficit)),
                                         T(0.5));
            auto loss = diffcore::add(mse, diffcore::scale(diffcore::mean_all(hinge),
                                                           T(pc.var_weight)));

            const double mse_val = double(mse.item());
            if (step == 0) res.first_loss = mse_val;
            res.final_loss = mse_val;
            opt.zero_grad();
            loss.backward();
            opt.step();
            ema_update();
            if (step % pc.log_every == 0 || step + 1 == pc.steps) {
                res.loss_log.emplace_back(step, mse_val);
                if (log)
                    (*log) << "wm_step=" << step << " loss_w=" << mse_val
                           << " total=" << double(loss.item()) << "\n";
            }
            if (step + 1 == pc.steps) {
                double std_sum = 0;
                for (size_t j = 0; j < cfg_.dim; ++j)
                    std_sum += std::sqrt(std::max(0.0, double(var.value()[j])));
                res.final_embed_std = std_sum / double(cfg_.dim);
            }
        }
        freeze();
        return res;
    }

    uint64_t weights_hash() const { return ps_->content_hash("wm."); }

private:
    WmConfig cfg_;
    ParamStore<T>* ps_;
    WmFrameEncoder<T> online_, target_;
    Tensor<T> temporal_, queries_;
    std::vector<nn::TransformerBlock<T>> pred_blocks_;
    nn::TransformerBlock<T> query_block_;
    nn::Linear<T> head_;
    bool frozen_ = false;
};

// ---------------------------------------------------------------------------
// residual adapter + attention pooling over the frozen patch embeddings
// ---------------------------------------------------------------------------

template <typename T>
class TactileAdapter {
public:
    TactileAdapter() = default;
    TactileAdapter(ParamStore<T>& ps, const WmConfig& cfg, Rng rng, double dropout_p = 0.1)
        : dropout_p_(dropout_p) {
        const size_t d = cfg.dim, bottleneck = cfg.dim / 4;
        fc1_ = nn::Linear<T>(ps, "adapter.fc1", d, bottleneck, rng);
        fc2_ = nn::Linear<T>(ps, "adapter.fc2", bottleneck, bottleneck, rng);
        fc3_ = nn::Linear<T>(ps, "adapter.fc3", bottleneck, d, rng);
        alpha_ = ps.create_const("adapter.alpha", {1}, T(0.1));
        pool_ = nn::AttentionPool<T>(ps, "adapter.pool", d, 8, rng);
    }

    // patches + alpha * MLP(patches)
    Tensor<T> adapt(const Tensor<T>& patches, const FwdCtx& ctx) const {
        auto h = gelu(fc1_.forward(patches));
        h = maybe_dropout(h, ctx);
        h = gelu(fc2_.forward(h));
        h = maybe_dropout(h, ctx);
        h = fc3_.forward(h);
        return add(patches, diffcore::scale_by_scalar(h, alpha_));
    }

    Tensor<T> pool(const Tensor<T>& adapted) const { return pool_.forward(adapted); }

private:
    Tensor<T> maybe_dropout(const Tensor<T>& x, const FwdCtx& ctx) const {
        if (!ctx.training || dropout_p_ == 0.0) return x;
        TD_CHECK(ctx.rng != nullptr, "adapter training forward needs an rng");
        return diffcore::dropout(x, dropout_p_, true, *ctx.rng);
    }

    double dropout_p_ = 0.1;
    nn::Linear<T> fc1_, fc2_, fc3_;
    Tensor<T> alpha_;
    nn::AttentionPool<T> pool_;
};

// ---------------------------------------------------------------------------
// heatmap export: per-patch L2 norms on the patch grid, as PPM + CSV
// ---------------------------------------------------------------------------

template <typename T>
std::vector<double> patch_norms(const Tensor<T>& patches) {
    const size_t p = patches.shape()[0], d = patches.shape()[1];
    std::vector<double> norms(p);
    for (size_t i = 0; i < p; ++i) {
        double s = 0;
        for (size_t j = 0; j < d; ++j) {
            const double v = double(patches.value()[i * d + j]);
            s += v * v;
        }
        norms[i] = std::sqrt(s);
    }
    return norms;
}

// writes <base>.ppm (min-max normalized, upscaled) and <base>.csv (raw norms)
template <typename T>
void heatmap_export(const Tensor<T>& patches, size_t grid, const std::string& base_path) {
    const auto norms = patch_norms(patches);
    TD_CHECK(norms.size() == grid * grid, "heatmap_export: patch count does not match grid");
    double mn = norms[0], mx = norms[0];
    for (double v : norms) {
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    const double range = mx - mn;
    const int up = 32;
    const int side = int(grid) * up;
    std::ofstream ppm(base_path + ".ppm", std::ios::binary);
    TD_CHECK(ppm.good(), "cannot write heatmap: " + base_path + ".ppm");
    ppm << "P6\n" << side << " " << side << "\n255\n";
    for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c) {
            const size_t cell = size_t(r / up) * grid + size_t(c / up);
            const double x = range < 1e-12 ? 0.5 : (norms[cell] - mn) / range;
            const unsigned char g = (unsigned char)std::lround(x * 255.0);
            const unsigned char rgb[3] = {g, g, g};
            ppm.write(reinterpret_cast<const char*>(rgb), 3);
        }
    TD_CHECK(ppm.good(), "heatmap write failed");

    std::ofstream csv(base_path + ".csv");
    TD_CHECK(csv.good(), "cannot write heatmap csv");
    char buf[64];
    for (size_t r = 0; r < grid; ++r) {
        for (size_t c = 0; c < grid; ++c) {
            std::snprintf(buf, sizeof(buf), "%.17g", norms[r * grid + c]);
            csv << buf << (c + 1 < grid ? "," : "\n");
        }
    }
}

inline std::vector<double> heatmap_csv_load(const std::string& path) {
    std::ifstream f(path);
    TD_CHECK(f.good(), "cannot open heatmap csv: " + path);
    std::vector<double> out;
    std::string cell;
    while (std::getline(f, cell)) {
        size_t pos = 0;
        while (pos < cell.size()) {
            size_t next = cell.find(',', pos);
            if (next == std::string::npos) next = cell.size();
            out.push_back(std::stod(cell.substr(pos, next - pos)));
            pos = next + 1;
        }
    }
    return out;
}

} // namespace tacdream::worldmodel
