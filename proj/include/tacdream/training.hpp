#pragma once

// Training orchestration: world-model pretraining, stage 1 (action loss +
// weighted spatial alignment, null dream), and stage 2 (adds the latent
// forecasting loss, activates the forecaster and adapter, keeps the world
// model frozen). Every step's losses go to metrics.csv; runs are resumable
// and bit-deterministic for a fixed (config, seed, data).

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tacdream/common.hpp"
#include "tacdream/datastore.hpp"
#include "tacdream/hsa.hpp"
#include "tacdream/model.hpp"

namespace tacdream::training {

using diffcore::Tensor;
using nlohmann::json;

struct TrainConfig {
    int stage = 1;
    std::string task = "peg_in_hole";  // peg_in_hole | tool_stabilize | all
    double lambda_hsa = 0.1;
    double lambda_w = 1.0;
    double hsa_temperature = 0.07;
    size_t batch = 8;
    size_t steps = 1200;
    double lr = 1e-4;
    double adapter_lr = 1e-5;  // adapter/pooling group
    double weight_decay = 1e-4;
    std::string lr_schedule = "constant";  // constant | cosine
    uint64_t seed = 0;
    double data_fraction = 1.0;
    double val_fraction = 0.1;

    // ablation flags
    bool disable_hsa = false;
    bool disable_dream = false;
    bool disable_tactile = false;
    bool dream_predicts_vision = false;
    std::string wm_size = "large";

    // model dims
    size_t d_model = 128;
    size_t enc_depth = 4;
    size_t heads = 8;
    size_t mid_layer = 2;
    size_t pol_depth = 3;
    size_t H = 8;
    size_t N = 5;
    double dropout = 0.1;

    // world-model pretraining
    size_t wm_steps = 1200;
    size_t wm_batch = 32;
    double wm_lr = 3e-4;
    size_t wm_context = 4;

    size_t snapshots = 5;  // forecaster snapshots across stage 2
    size_t log_every = 1;

    model::ModelConfig model_config() const {
        model::ModelConfig mc;
        mc.enc.token_dim = d_model;
        mc.enc.depth = enc_depth;
        mc.enc.heads = heads;
        mc.enc.mid_layer = mid_layer;
        mc.enc.dropout = dropout;
        mc.wm.dim = d_model;
        mc.wm.heads = heads;
        mc.wm.size = wm_size;
        mc.wm.context = wm_context;
        mc.wm.horizon = N;
        mc.pol.dim = d_model;
        mc.pol.heads = heads;
        mc.pol.depth = pol_depth;
        mc.pol.horizon = H;
        mc.pol.dropout = dropout;
        mc.use_dream = stage == 2 && !disable_dream;
        mc.disable_tactile = disable_tactile;
        return mc;
    }

    double effective_lambda_hsa() const { return disable_hsa ? 0.0 : lambda_hsa; }

    json to_json() const {
        json j;
        j["stage"] = stage;
        j["task"] = task;
        j["lambda_hsa"] = lambda_hsa;
        j["lambda_w"] = lambda_w;
        j["hsa_temperature"] = hsa_temperature;
        j["batch"] = batch;
        j["steps"] = steps;
        j["lr"] = lr;
        j["adapter_lr"] = adapter_lr;
        j["weight_decay"] = weight_decay;
        j["lr_schedule"] = lr_schedule;
        j["seed"] = seed;
        j["data_fraction"] = data_fraction;
        j["val_fraction"] = val_fraction;
        j["disable_hsa"] = disable_hsa;
        j["disable_dream"] = disable_dream;
        j["disable_tactile"] = disable_tactile;
        j["dream_predicts_vision"] = dream_predicts_vision;
        j["wm_size"] = wm_size;
        j["d_model"] = d_model;
        j["enc_depth"] = enc_depth;
        j["heads"] = heads;
        j["mid_layer"] = mid_layer;
        j["pol_depth"] = pol_depth;
        j["H"] = H;
        j["N"] = N;
        j["dropout"] = dropout;
        j["wm_steps"] = wm_steps;
        j["wm_batch"] = wm_batch;
        j["wm_lr"] = wm_lr;
        j["wm_context"] = wm_context;
        j["snapshots"] = snapshots;
        return j;
    }
};

struct StepMetrics {
    size_t step = 0;
    double loss_total = 0;
    double loss_action_draft = 0;
    double loss_action_final = 0;
    double hsa_w = 0, hsa_tp = 0;
    double loss_w = 0;
    size_t skipped_w = 0, skipped_tp = 0;
};

struct TrainRunResult {
    std::vector<StepMetrics> metrics;
    double first_loss = 0, final_loss = 0;
    double val_lw_start = 0, val_lw_end = 0;  // stage 2, held-out forecasting loss
    std::string checkpoint_dir;
};

inline std::string fmt_g(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

// sample index pools and normalization statistics for a training split
struct SplitInfo {
    std::vector<size_t> train_eps, val_eps;
    std::vector<std::pair<size_t, size_t>> train_pairs, val_pairs;
    std::array<double, 7> action_mean{}, action_std{}, proprio_mean{}, proprio_std{};
};

inline SplitInfo make_split(const datastore::Dataset& ds, const TrainConfig& cfg) {
    std::vector<size_t> ids = ds.subset(cfg.data_fraction, cfg.seed);
    if (cfg.task != "all") {
        const auto want = simworld::task_from_name(cfg.task);
        std::vector<size_t> filtered;
        for (size_t i : ids)
            if (ds.episode(i).task == want) filtered.push_back(i);
        ids = filtered;
    }
    TD_CHECK(!ids.empty(), "training: no episodes for task " + cfg.task);
    SplitInfo s;
    const size_t n_val = std::max<size_t>(1, size_t(std::llround(cfg.val_fraction * ids.size())));
    TD_CHECK(ids.size() > n_val, "training: dataset too small for the validation split");
    s.train_eps.assign(ids.begin(), ids.end() - n_val);
    s.val_eps.assign(ids.end() - n_val, ids.end());
    for (size_t ei : s.train_eps)
        for (size_t t = 0; t < ds.episode(ei).length; ++t) s.train_pairs.emplace_back(ei, t);
    for (size_t ei : s.val_eps)
        for (size_t t = 0; t < ds.episode(ei).length; ++t) s.val_pairs.emplace_back(ei, t);

    // per-dim z-score statistics from the training split
    std::array<double, 7> a_sum{}, a_sq{}, p_sum{}, p_sq{};
    size_t n = 0;
    for (size_t ei : s.train_eps) {
        const auto& ep = ds.episode(ei);
        for (size_t t = 0; t < ep.length; ++t) {
            for (int d = 0; d < 7; ++d) {
                const double a = ep.action[t * 7 + d];
                const double p = ep.proprio[t * 7 + d];
                a_sum[d] += a;
                a_sq[d] += a * a;
                p_sum[d] += p;
                p_sq[d] += p * p;
            }
            ++n;
        }
    }
    for (int d = 0; d < 7; ++d) {
        s.action_mean[d] = a_sum[d] / double(n);
        s.action_std[d] =
            std::sqrt(std::max(0.0, a_sq[d] / double(n) - s.action_mean[d] * s.action_mean[d]));
        if (s.action_std[d] < 1e-8) s.action_std[d] = 1e-8;
        s.proprio_mean[d] = p_sum[d] / double(n);
        s.proprio_std[d] =
            std::sqrt(std::max(0.0, p_sq[d] / double(n) - s.proprio_mean[d] * s.proprio_mean[d]));
        if (s.proprio_std[d] < 1e-8) s.proprio_std[d] = 1e-8;
    }
    return s;
}

template <typename T = float>
class Trainer {
public:
    Trainer(const datastore::Dataset& ds, TrainConfig cfg) : ds_(ds), cfg_(cfg) {}

    const TrainConfig& config() const { return cfg_; }

    // ---- world-model pretraining -------------------------------------------

    worldmodel::WmPretrainResult pretrain_wm(const std::string& out_dir,
                                             std::ostream* log = nullptr,
                                             bool shuffle_targets = false) {
        SplitInfo split = make_split(ds_, cfg_);
        model::PolicyModel<T> m(cfg_.model_config(), cfg_.seed);
        worldmodel::WmPretrainConfig pc;
        pc.steps = cfg_.wm_steps;
        pc.batch = cfg_.wm_batch;
        pc.lr = cfg_.wm_lr;
        pc.seed = cfg_.seed;
        pc.shuffle_targets = shuffle_targets;
        auto res = m.wm().pretrain(ds_, split.train_eps, pc, log);
        std::filesystem::create_directories(out_dir);
        save_prefixed(m.store(), "wm.", out_dir + "/wm.dtwt");
        json meta;
        meta["frozen"] = true;
        meta["config"] = cfg_.to_json();
        meta["first_loss"] = res.first_loss;
        meta["final_loss"] = res.final_loss;
        meta["final_embed_std"] = res.final_embed_std;
        std::ofstream f(out_dir + "/wm_meta.json");
        f << meta.dump(2) << "\n";
        return res;
    }

    // ---- stage 1 -------------------------------------------------------------

    TrainRunResult train_stage1(const std::string& out_dir,
                                const std::string& resume_dir = "") {
        TD_CHECK(cfg_.stage == 1, "train_stage1 called with stage != 1");
        SplitInfo split = make_split(ds_, cfg_);
        model::PolicyModel<T> m(cfg_.model_config(), cfg_.seed);
        m.set_norm_stats(split.action_mean, split.action_std, split.proprio_mean,
                         split.proprio_std);
        std::vector<Tensor<T>> main_params;
        append_prefixed(m.store(), "enc.", main_params);
        append_prefixed(m.store(), "policy.", main_params);
        diffcore::AdamW<T> opt(main_params, T(cfg_.lr), T(cfg_.weight_decay));
        size_t start_step = 0;
        if (!resume_dir.empty()) start_step = restore(m, {&opt}, resume_dir);
        return run_loop(m, {&opt}, split, out_dir, start_step, nullptr);
    }

    // ---- stage 2 -------------------------------------------------------------

    TrainRunResult train_stage2(const std::string& out_dir, const std::string& stage1_dir,
                                const std::string& wm_dir, const std::string& resume_dir = "") {
        TD_CHECK(cfg_.stage == 2, "train_stage2 called with stage != 2");
        TD_CHECK(std::filesystem::exists(stage1_dir + "/params.dtwt"),
                 "stage 2 requires a stage-1 checkpoint (missing " + stage1_dir + ")");
        TD_CHECK(std::filesystem::exists(wm_dir + "/wm.dtwt"),
                 "stage 2 requires a pretrained world-model checkpoint (missing " + wm_dir + ")");
        {
            std::ifstream f(wm_dir + "/wm_meta.json");
            TD_CHECK(f.good(), "missing wm_meta.json next to wm.dtwt");
            json meta = json::parse(f);
            TD_CHECK(meta.value("frozen", false), "world-model checkpoint is not marked frozen");
        }
        SplitInfo split = make_split(ds_, cfg_);
        model::PolicyModel<T> m(cfg_.model_config(), cfg_.seed);
        m.load_params(stage1_dir);  // encoders + policy (+ un-trained extras)
        m.store().load(wm_dir + "/wm.dtwt", /*allow_extra=*/false);
        m.wm().freeze();
        m.set_norm_stats(split.action_mean, split.action_std, split.proprio_mean,
                         split.proprio_std);

        std::vector<Tensor<T>> main_params;
        append_prefixed(m.store(), "enc.", main_params);
        append_prefixed(m.store(), "policy.", main_params);
        append_prefixed(m.store(), "forecaster.", main_params);
        diffcore::AdamW<T> opt_main(main_params, T(cfg_.lr), T(cfg_.weight_decay));
        std::vector<Tensor<T>> adapter_params;
        append_prefixed(m.store(), "adapter.", adapter_params);
        diffcore::AdamW<T> opt_adapter(adapter_params, T(cfg_.adapter_lr), T(cfg_.weight_decay));

        const uint64_t wm_hash_before = m.wm().weights_hash();
        size_t start_step = 0;
        std::vector<diffcore::AdamW<T>*> opts = {&opt_main, &opt_adapter};
        if (!resume_dir.empty()) start_step = restore(m, opts, resume_dir);
        auto res = run_loop(m, opts, split, out_dir, start_step, &wm_hash_before);
        TD_CHECK(m.wm().weights_hash() == wm_hash_before,
                 "frozen world-model weights were mutated during stage 2");
        return res;
    }

    // forecasting loss over (a sample of) the held-out pairs, no-grad
    double eval_val_lw(model::PolicyModel<T>& m, const SplitInfo& split,
                       size_t max_pairs = 256) const {
        diffcore::NoGrad ng;
        if (split.val_pairs.empty()) return 0.0;
        double total = 0;
        size_t n = 0;
        const size_t stride = std::max<size_t>(1, split.val_pairs.size() / max_pairs);
        for (size_t i = 0; i < split.val_pairs.size(); i += stride) {
            const auto& [ei, t] = split.val_pairs[i];
            auto batch = datastore::load_batch(ds_, {{ei, t}}, cfg_.H, cfg_.N);
            apply_tactile_disable(batch);
            auto in = m.make_input(batch.tpv.data(), batch.wrist.data(), batch.tactile.data(),
                                   proprio_of(batch, 0), batch.prompt[0]);
            auto [h_mid, h_align] = m.encoder().encode(in, nn::eval_ctx());
            (void)h_mid;
            auto draft = m.expert().act(
                h_align, forecaster::null_dream<T>(m.config().wm.patches(), m.config().wm.dim),
                nn::eval_ctx());
            auto z = m.wm().embed(in.tactile);
            auto adapted = m.adapter().adapt(z.patches, nn::eval_ctx());
            auto dream = m.forecaster_mlp().dream(adapted, draft);
            auto target = m.wm().embed(batch.future_tactile.data());
            total += double(forecaster::forecasting_loss(dream.patches, target.patches).item());
            n += 1;
        }
        return total / double(n);
    }

private:
    static std::array<float, 7> proprio_of(const datastore::Batch& b, size_t i) {
        std::array<float, 7> p;
        for (int d = 0; d < 7; ++d) p[d] = b.proprio[i * 7 + d];
        return p;
    }

    void apply_tactile_disable(datastore::Batch& b) const {
        if (!cfg_.disable_tactile) return;
        std::fill(b.tactile.begin(), b.tactile.end(), 0.5f);
        std::fill(b.future_tactile.begin(), b.future_tactile.end(), 0.5f);
    }

    static void append_prefixed(nn::ParamStore<T>& ps, const std::string& prefix,
                                std::vector<Tensor<T>>& out) {
        for (auto& t : ps.with_prefix(prefix)) out.push_back(t);
    }

    static void save_prefixed(const nn::ParamStore<T>& ps, const std::string& prefix,
                              const std::string& path) {
        std::vector<diffcore::NamedBuffer> bufs;
        for (const auto& [name, v] : ps.named()) {
            if (name.rfind(prefix, 0) != 0) continue;
            diffcore::NamedBuffer b;
            b.name = name;
            b.shape = v.shape();
            for (const T& x : v.value()) b.data.push_back(float(x));
            bufs.push_back(std::move(b));
        }
        diffcore::save_dtwt(path, bufs);
    }

    // optimizer state as named moment buffers, so resumes are bit-exact
    static void save_opt(const diffcore::AdamW<T>& opt, const nn::ParamStore<T>&,
                         const std::string& path) {
        std::vector<diffcore::NamedBuffer> bufs;
        const auto& st = const_cast<diffcore::AdamW<T>&>(opt).state();
        for (size_t i = 0; i < st.m.size(); ++i) {
            diffcore::NamedBuffer bm, bv;
            char name[32];
            std::snprintf(name, sizeof(name), "m.%06zu", i);
            bm.name = name;
            bm.shape = {st.m[i].size()};
            for (T x : st.m[i]) bm.data.push_back(float(x));
            std::snprintf(name, sizeof(name), "v.%06zu", i);
            bv.name = name;
            bv.shape = {st.v[i].size()};
            for (T x : st.v[i]) bv.data.push_back(float(x));
            bufs.push_back(std::move(bm));
            bufs.push_back(std::move(bv));
        }
        diffcore::NamedBuffer step_buf;
        step_buf.name = "step_count";
        step_buf.shape = {1};
        step_buf.data.push_back(float(opt.step_count()));
        bufs.push_back(std::move(step_buf));
        diffcore::save_dtwt(path, bufs);
    }

    static void load_opt(diffcore::AdamW<T>& opt, const std::string& path) {
        auto bufs = diffcore::load_dtwt(path);
        auto& st = opt.state();
        for (const auto& b : bufs) {
            if (b.name == "step_count") {
                st.step_count = uint64_t(b.data[0]);
                continue;
            }
            const size_t idx = size_t(std::stoul(b.name.substr(2)));
            TD_CHECK(idx < st.m.size(), "optimizer state index out of range");
            auto& dst = b.name[0] == 'm' ? st.m[idx] : st.v[idx];
            TD_CHECK(dst.size() == b.data.size(), "optimizer state size mismatch");
            for (size_t i = 0; i < dst.size(); ++i) dst[i] = T(b.data[i]);
        }
    }

    size_t restore(model::PolicyModel<T>& m, std::vector<diffcore::AdamW<T>*> opts,
                   const std::string& dir) {
        m.load_params(dir);
        std::ifstream f(dir + "/state.json");
        TD_CHECK(f.good(), "resume: missing state.json in " + dir);
        json st = json::parse(f);
        const size_t step = st.at("step").get<size_t>();
        for (size_t i = 0; i < opts.size(); ++i)
            load_opt(*opts[i], dir + "/optim" + std::to_string(i) + ".dtwt");
        return step;
    }

    void save_run(model::PolicyModel<T>& m, const std::vector<diffcore::AdamW<T>*>& opts,
                  const std::string& dir, size_t step) const {
        json extra;
        extra["stage"] = cfg_.stage;
        extra["train_config"] = cfg_.to_json();
        m.save(dir, extra);
        for (size_t i = 0; i < opts.size(); ++i)
            save_opt(*opts[i], m.store(), dir + "/optim" + std::to_string(i) + ".dtwt");
        json st;
        st["step"] = step;
        st["seed"] = cfg_.seed;
        std::ofstream f(dir + "/state.json");
        f << st.dump(2) << "\n";
    }

    TrainRunResult run_loop(model::PolicyModel<T>& m, std::vector<diffcore::AdamW<T>*> opts,
                            const SplitInfo& split, const std::string& out_dir,
                            size_t start_step, const uint64_t* wm_hash) {
        namespace fs = std::filesystem;
        fs::create_directories(out_dir);
        TD_CHECK(cfg_.batch >= 2, "training: batch must be >= 2 for in-batch negatives");
        const bool stage2 = cfg_.stage == 2;
        const bool dreaming = stage2 && !cfg_.disable_dream;
        const double lambda_hsa = cfg_.effective_lambda_hsa();

        TrainRunResult result;
        result.checkpoint_dir = out_dir;
        std::ofstream metrics(out_dir + "/metrics.csv",
                              start_step == 0 ? std::ios::trunc : std::ios::app);
        if (start_step == 0)
            metrics << "step,loss_total,loss_action_draft,loss_action_final,hsa_w,hsa_tp,loss_w\n";
        std::ofstream hsa_log(out_dir + "/hsa.log",
                              start_step == 0 ? std::ios::trunc : std::ios::app);

        if (dreaming) result.val_lw_start = eval_val_lw(m, split);

        std::vector<size_t> snapshot_steps;
        if (dreaming && cfg_.snapshots > 0) {
            fs::create_directories(out_dir + "/snapshots");
            save_prefixed(m.store(), "adapter.", out_dir + "/snapshots/dream_000.dtwt");
            append_save_prefixed(m.store(), "forecaster.",
                                 out_dir + "/snapshots/dream_000.dtwt");
            for (size_t k = 1; k <= cfg_.snapshots; ++k)
                snapshot_steps.push_back(cfg_.steps * k / cfg_.snapshots);
        }

        const auto null_d = forecaster::null_dream<T>(m.config().wm.patches(), m.config().wm.dim);

        for (size_t step = start_step; step < cfg_.steps; ++step) {
            Rng rng_step = Rng(cfg_.seed).split(0x57E9u).split(step);
            // batch sampling first, then dropout draws, so the stream is
            // stable across stage variants up to the start of dream-only ops
            std::vector<std::pair<size_t, size_t>> idx;
            for (size_t b = 0; b < cfg_.batch; ++b)
                idx.push_back(split.train_pairs[rng_step.uniform_int(split.train_pairs.size())]);
            auto batch = datastore::load_batch(ds_, idx, cfg_.H, cfg_.N);
            apply_tactile_disable(batch);

            nn::FwdCtx ctx{true, &rng_step};
            const size_t img_len = datastore::EpisodeRecord::frame_len(batch.img_size);
            const size_t tac_len = datastore::EpisodeRecord::frame_len(batch.tac_size);
            const size_t grid = m.config().enc.img_grid();
            const double patch_px = double(m.config().enc.patch_px);

            Tensor<T> sum_draft, sum_final, sum_lw;
            std::vector<hsa::HsaSample<T>> hsa_batch;
            for (size_t i = 0; i < cfg_.batch; ++i) {
                auto in = m.make_input(batch.tpv.data() + i * img_len,
                                       batch.wrist.data() + i * img_len,
                                       batch.tactile.data() + i * tac_len, proprio_of(batch, i),
                                       batch.prompt[i]);
                auto [h_mid, h_align] = m.encoder().encode(in, ctx);
                auto draft = m.expert().act(h_align, null_d, ctx);
                auto target = Tensor<T>::from_data(
                    {cfg_.H, 7}, m.normalize_chunk(batch.target_chunk.data() + i * cfg_.H * 7));
                auto l_draft = policy::action_loss(draft, target);
                sum_draft = sum_draft.defined() ? diffcore::add(sum_draft, l_draft) : l_draft;

                hsa::HsaSample<T> hs;
                hs.h_tau = *encoders::MultimodalEncoder<T>::pool_region(
                    h_mid, encoders::Modality::tactile, {});
                const auto mask_w =
                    geometry::bbox_token_mask(batch.bbox_wrist[i], grid, grid, patch_px);
                const auto mask_tp =
                    geometry::bbox_token_mask(batch.bbox_tpv[i], grid, grid, patch_px);
                hs.h_w = encoders::MultimodalEncoder<T>::pool_region(
                    h_mid, encoders::Modality::wrist, mask_w);
                hs.h_tp = encoders::MultimodalEncoder<T>::pool_region(
                    h_mid, encoders::Modality::tpv, mask_tp);
                hs.neg_w = encoders::MultimodalEncoder<T>::pool_region(
                    h_mid, encoders::Modality::wrist, hsa::complement_mask(mask_w));
                hs.neg_tp = encoders::MultimodalEncoder<T>::pool_region(
                    h_mid, encoders::Modality::tpv, hsa::complement_mask(mask_tp));
                hsa_batch.push_back(std::move(hs));

                if (dreaming) {
                    auto z = m.wm().embed(in.tactile);
                    auto adapted = m.adapter().adapt(z.patches, ctx);
                    auto dream = m.forecaster_mlp().dream(adapted, draft);
                    auto target_emb = m.wm().embed(batch.future_tactile.data() + i * tac_len);
                    auto lw = forecaster::forecasting_loss(dream.patches, target_emb.patches);
                    if (cfg_.dream_predicts_vision) {
                        auto vis_pred = m.forecaster_mlp().dream_vision(adapted, draft);
                        Tensor<T> vis_target;
                        {
                            diffcore::NoGrad ng;
                            vis_target = m.encoder().patch_embed_only(
                                batch.future_wrist.data() + i * img_len,
                                encoders::Modality::wrist);
                        }
                        lw = diffcore::add(
                            lw, forecaster::forecasting_loss(vis_pred, vis_target));
                    }
                    sum_lw = sum_lw.defined() ? diffcore::add(sum_lw, lw) : lw;
                    auto final_chunk = m.expert().act(h_align, dream, ctx);
                    auto l_final = policy::action_loss(final_chunk, target);
                    sum_final = sum_final.defined() ? diffcore::add(sum_final, l_final) : l_final;
                }
            }

            hsa::HsaConfig hc;
            hc.temperature = cfg_.hsa_temperature;
            auto [hsa_total, hsa_bd] = hsa::hsa_loss(hsa_batch, hc);

            StepMetrics sm;
            sm.step = step;
            const T inv_b = T(1) / T(cfg_.batch);
            auto loss = diffcore::scale(sum_draft, inv_b);
            sm.loss_action_draft = double(loss.item());
            if (dreaming) {
                auto lf = diffcore::scale(sum_final, inv_b);
                sm.loss_action_final = double(lf.item());
                loss = diffcore::add(loss, lf);
                auto lw = diffcore::scale(sum_lw, inv_b);
                sm.loss_w = double(lw.item());
                loss = diffcore::add(loss, diffcore::scale(lw, T(cfg_.lambda_w)));
            }
            sm.hsa_w = hsa_bd.loss_w;
            sm.hsa_tp = hsa_bd.loss_tp;
            sm.skipped_w = hsa_bd.skipped_w;
            sm.skipped_tp = hsa_bd.skipped_tp;
            loss = diffcore::add(loss, diffcore::scale(hsa_total, T(lambda_hsa)));
            sm.loss_total = double(loss.item());
            TD_CHECK(std::isfinite(sm.loss_total),
                     "training diverged: non-finite total loss at step " + std::to_string(step));

            for (auto* o : opts) o->zero_grad();
            loss.backward();
            const double sched = cfg_.lr_schedule == "cosine"
                                     ? 0.5 * (1.0 + std::cos(M_PI * double(step) /
                                                             double(std::max<size_t>(1, cfg_.steps))))
                                     : 1.0;
            opts[0]->set_lr(T(cfg_.lr * sched));
            if (opts.size() > 1) opts[1]->set_lr(T(cfg_.adapter_lr * sched));
            for (auto* o : opts) o->step();

            if (step == start_step) result.first_loss = sm.loss_total;
            result.final_loss = sm.loss_total;
            result.metrics.push_back(sm);
            if (step % cfg_.log_every == 0 || step + 1 == cfg_.steps) {
                metrics << step << "," << fmt_g(sm.loss_total) << ","
                        << fmt_g(sm.loss_action_draft) << "," << fmt_g(sm.loss_action_final)
                        << "," << fmt_g(sm.hsa_w) << "," << fmt_g(sm.hsa_tp) << ","
                        << fmt_g(sm.loss_w) << "\n";
                hsa_log << "step=" << step << " hsa_w=" << fmt_g(sm.hsa_w)
                        << " hsa_tp=" << fmt_g(sm.hsa_tp) << " skipped_w=" << sm.skipped_w
                        << " skipped_tp=" << sm.skipped_tp << "\n";
            }
            for (size_t k = 0; k < snapshot_steps.size(); ++k) {
                if (step + 1 == snapshot_steps[k]) {
                    char name[64];
                    std::snprintf(name, sizeof(name), "/snapshots/dream_%03zu.dtwt", k + 1);
                    save_prefixed(m.store(), "adapter.", out_dir + name);
                    append_save_prefixed(m.store(), "forecaster.", out_dir + name);
                }
            }
        }
        if (dreaming) result.val_lw_end = eval_val_lw(m, split);
        if (wm_hash)
            TD_CHECK(m.wm().weights_hash() == *wm_hash,
                     "frozen world-model weights changed inside the training loop");
        save_run(m, opts, out_dir, cfg_.steps);
        metrics.flush();
        return result;
    }

    // appends prefix-filtered params to an existing dtwt (read, merge, write)
    static void append_save_prefixed(const nn::ParamStore<T>& ps, const std::string& prefix,
                                     const std::string& path) {
        std::vector<diffcore::NamedBuffer> bufs;
        if (std::filesystem::exists(path)) bufs = diffcore::load_dtwt(path);
        for (const auto& [name, v] : ps.named()) {
            if (name.rfind(prefix, 0) != 0) continue;
            diffcore::NamedBuffer b;
            b.name = name;
            b.shape = v.shape();
            for (const T& x : v.value()) b.data.push_back(float(x));
            bufs.push_back(std::move(b));
        }
        diffcore::save_dtwt(path, bufs);
    }

    const datastore::Dataset& ds_;
    TrainConfig cfg_;
};

} // namespace tacdream::training
