#pragma once

// Closed-loop evaluation: receding-horizon rollouts, success-rate statistics
// over seeds, per-episode traces, and the dream-quality diagnostics (held-out
// cosine between predicted and realized future embeddings, and the heatmap
// series across forecaster snapshots).

#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "tacdream/common.hpp"
#include "tacdream/datastore.hpp"
#include "tacdream/model.hpp"
#include "tacdream/simworld.hpp"
#include "tacdream/threading.hpp"
#include "tacdream/worldmodel.hpp"

namespace tacdream::evalharness {

using nlohmann::json;

struct EpisodeTrace {
    bool success = false;
    int steps = 0;
    double final_lateral_err_mm = 0;  // peg: tip-to-hole; tool: tilt in degrees
    int slip_events = 0;
};

struct EvalReport {
    double sr_mean = 0, sr_std = 0;
    std::vector<double> sr_per_seed;
    std::vector<EpisodeTrace> traces;
    double wall_clock_s = 0;

    json metrics_json() const {
        json j;
        j["sr_mean"] = sr_mean;
        j["sr_std"] = sr_std;
        j["sr_per_seed"] = sr_per_seed;
        double err = 0, steps = 0;
        size_t slips = 0;
        for (const auto& t : traces) {
            err += t.final_lateral_err_mm;
            steps += t.steps;
            slips += size_t(t.slip_events);
        }
        const double n = double(std::max<size_t>(1, traces.size()));
        j["mean_final_err"] = err / n;
        j["mean_steps"] = steps / n;
        j["total_slip_events"] = slips;
        return j;
    }
};

template <typename T>
EpisodeTrace run_episode(const model::PolicyModel<T>& m, const simworld::Env& env,
                         uint64_t episode_seed) {
    EpisodeTrace trace;
    simworld::WorldState s = env.reset(episode_seed);
    std::array<double, 2> prev_off = s.grasp_offset;
    while (!s.done) {
        const simworld::Observation obs = env.render(s);
        const auto res = m.think_dream_act(obs);
        for (size_t j = 0; j < res.final.H && !s.done; ++j) {
            s = env.step(s, res.final.action_at(j)).state;
            const double slip = std::hypot(s.grasp_offset[0] - prev_off[0],
                                           s.grasp_offset[1] - prev_off[1]);
            if (slip > 0.0002) trace.slip_events += 1;
            prev_off = s.grasp_offset;
        }
    }
    trace.success = s.success;
    trace.steps = s.step_index;
    if (env.task() == simworld::Task::peg_in_hole) {
        const auto tip = env.tip_position(s);
        trace.final_lateral_err_mm =
            1e3 * std::hypot(tip[0] - s.target_xy[0], tip[1] - s.target_xy[1]);
    } else {
        trace.final_lateral_err_mm =
            std::hypot(s.tool_tilt[0], s.tool_tilt[1]) * 180.0 / M_PI;
    }
    return trace;
}

// success rate over n_episodes x seeds; deterministic per seed, parallel over
// episodes (the model is shared read-only; rollouts are grad-free)
template <typename T>
EvalReport evaluate(const model::PolicyModel<T>& m, simworld::Task task, size_t n_episodes,
                    const std::vector<uint64_t>& seeds, size_t workers = 1,
                    const simworld::SimParams& sim = {}) {
    TD_CHECK(!seeds.empty(), "evaluate: needs at least one seed");
    StopWatch watch;
    EvalReport rep;
    const simworld::Env env(task, sim);
    rep.traces.resize(n_episodes * seeds.size());
    threading::parallel_for(n_episodes * seeds.size(), workers, [&](size_t i) {
        const size_t si = i / n_episodes, ei = i % n_episodes;
        const uint64_t ep_seed = Rng(seeds[si]).split(0xE7A1u).split(ei).next_u64();
        rep.traces[i] = run_episode(m, env, ep_seed);
    });
    for (size_t si = 0; si < seeds.size(); ++si) {
        size_t ok = 0;
        for (size_t ei = 0; ei < n_episodes; ++ei) ok += rep.traces[si * n_episodes + ei].success;
        rep.sr_per_seed.push_back(100.0 * double(ok) / double(n_episodes));
    }
    double mean = 0;
    for (double v : rep.sr_per_seed) mean += v;
    mean /= double(rep.sr_per_seed.size());
    rep.sr_mean = mean;
    if (rep.sr_per_seed.size() > 1) {
        double var = 0;
        for (double v : rep.sr_per_seed) var += (v - mean) * (v - mean);
        rep.sr_std = std::sqrt(var / double(rep.sr_per_seed.size() - 1));
    }
    rep.wall_clock_s = watch.seconds();
    return rep;
}

inline void write_report(const EvalReport& rep, const std::string& path) {
    json j;
    j["metrics"] = rep.metrics_json();
    j["wall_clock_s"] = rep.wall_clock_s;
    std::ofstream f(path);
    f << j.dump(2) << "\n";
    TD_CHECK(f.good(), "cannot write report: " + path);
}

// ---------------------------------------------------------------------------
// dream quality: cosine(H_dream, embedding of the realized t+N frame) on
// held-out pairs, plus the per-snapshot heatmap error series
// ---------------------------------------------------------------------------

struct DreamQuality {
    double mean_cosine = 0;
    std::vector<double> cosines;
    std::vector<double> snapshot_heatmap_mae;  // index 0 = init snapshot
};

template <typename T>
double flat_cosine(const diffcore::Tensor<T>& a, const diffcore::Tensor<T>& b) {
    double num = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.numel(); ++i) {
        num += double(a.value()[i]) * double(b.value()[i]);
        na += double(a.value()[i]) * double(a.value()[i]);
        nb += double(b.value()[i]) * double(b.value()[i]);
    }
    if (na == 0 || nb == 0) return 0;
    return num / (std::sqrt(na) * std::sqrt(nb));
}

inline std::vector<double> normalized_heatmap(const std::vector<double>& norms) {
    double mn = norms[0], mx = norms[0];
    for (double v : norms) {
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    std::vector<double> out(norms.size(), 0.5);
    if (mx - mn < 1e-12) return out;
    for (size_t i = 0; i < norms.size(); ++i) out[i] = (norms[i] - mn) / (mx - mn);
    return out;
}

// computes the held-out dream cosine for the model as loaded, and (when a
// snapshot dir is given) the heatmap MAE series across forecaster snapshots
template <typename T>
DreamQuality dream_quality(model::PolicyModel<T>& m, const datastore::Dataset& ds,
                           const std::vector<std::pair<size_t, size_t>>& val_pairs,
                           const std::string& snapshot_dir = "",
                           const std::string& export_dir = "", size_t max_pairs = 128) {
    diffcore::NoGrad ng;
    DreamQuality dq;
    const size_t grid = m.config().wm.grid();
    const size_t stride = std::max<size_t>(1, val_pairs.size() / max_pairs);

    auto dream_for = [&](const std::pair<size_t, size_t>& pr) {
        const auto& [ei, t] = pr;
        auto batch = datastore::load_batch(ds, {{ei, t}}, m.config().pol.horizon,
                                           m.config().wm.horizon);
        std::array<float, 7> prop;
        for (int d = 0; d < 7; ++d) prop[d] = batch.proprio[d];
        auto in = m.make_input(batch.tpv.data(), batch.wrist.data(), batch.tactile.data(), prop,
                               batch.prompt[0]);
        auto [h_mid, h_align] = m.encoder().encode(in, nn::eval_ctx());
        (void)h_mid;
        auto draft = m.expert().act(
            h_align, forecaster::null_dream<T>(m.config().wm.patches(), m.config().wm.dim),
            nn::eval_ctx());
        auto z = m.wm().embed(in.tactile);
        auto adapted = m.adapter().adapt(z.patches, nn::eval_ctx());
        auto dream = m.forecaster_mlp().dream(adapted, draft);
        auto target = m.wm().embed(batch.future_tactile.data());
        return std::make_pair(dream, target);
    };

    for (size_t i = 0; i < val_pairs.size(); i += stride) {
        auto [dream, target] = dream_for(val_pairs[i]);
        dq.cosines.push_back(flat_cosine(dream.patches, target.patches));
    }
    double mean = 0;
    for (double c : dq.cosines) mean += c;
    dq.mean_cosine = dq.cosines.empty() ? 0 : mean / double(dq.cosines.size());

    if (!snapshot_dir.empty()) {
        namespace fs = std::filesystem;
        if (!export_dir.empty()) fs::create_directories(export_dir);
        for (size_t k = 0;; ++k) {
            char name[64];
            std::snprintf(name, sizeof(name), "/dream_%03zu.dtwt", k);
            const std::string path = snapshot_dir + name;
            if (!fs::exists(path)) break;
            m.store().load(path, false);
            double mae = 0;
            size_t n = 0;
            bool exported = false;
            for (size_t i = 0; i < val_pairs.size(); i += stride) {
                auto [dream, target] = dream_for(val_pairs[i]);
                const auto hp = normalized_heatmap(worldmodel::patch_norms(dream.patches));
                const auto ht = normalized_heatmap(worldmodel::patch_norms(target.patches));
                for (size_t c = 0; c < hp.size(); ++c) mae += std::abs(hp[c] - ht[c]);
                n += hp.size();
                if (!exported && !export_dir.empty()) {
                    char base[64];
                    std::snprintf(base, sizeof(base), "/heatmap_%03zu", k);
                    worldmodel::heatmap_export(dream.patches, grid, export_dir + base);
                    if (k == 0)
                        worldmodel::heatmap_export(target.patches, grid,
                                                   export_dir + "/heatmap_target");
                    exported = true;
                }
            }
            dq.snapshot_heatmap_mae.push_back(mae / double(n));
        }
    }
    return dq;
}

} // namespace tacdream::evalharness
