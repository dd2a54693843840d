#pragma once

// Experiment runners: the ablation grid (full / dream-only / hsa-only /
// vision-only over seeds) and the data-scaling study. Each (variant, seed)
// cell trains its own models; the dataset and per-seed world-model
// checkpoints are shared read-only.

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "tacdream/evalharness.hpp"
#include "tacdream/training.hpp"

namespace tacdream::training {

struct AblationVariant {
    std::string name;
    bool disable_hsa = false;
    bool disable_dream = false;
    bool disable_tactile = false;
    std::string wm_size = "";      // empty = keep base
    double data_fraction = -1;     // <0 = keep base
    bool dream_predicts_vision = false;
};

inline std::vector<AblationVariant> default_ablation_grid() {
    return {
        {"full", false, false, false},
        {"dream_only", true, false, false},
        {"hsa_only", false, true, false},
        {"vision_only", true, true, true},
    };
}

inline AblationVariant variant_by_name(const std::string& name) {
    for (const auto& v : default_ablation_grid())
        if (v.name == name) return v;
    if (name == "tactile_vision") {
        AblationVariant v{"tactile_vision", false, false, false};
        v.dream_predicts_vision = true;
        return v;
    }
    if (name == "wm_small") {
        AblationVariant v{"wm_small", false, false, false};
        v.wm_size = "small";
        return v;
    }
    TD_CHECK(false, "unknown ablation variant: " + name);
    return {};
}

struct AblationCell {
    std::string variant;
    uint64_t seed = 0;
    bool ok = false;
    std::string error;
    double sr = 0;  // single-seed success rate
    evalharness::EvalReport report;
};

struct AblationTable {
    std::vector<AblationCell> cells;

    // per-variant mean +- std over seeds
    std::map<std::string, std::pair<double, double>> aggregate() const {
        std::map<std::string, std::vector<double>> by;
        for (const auto& c : cells)
            if (c.ok) by[c.variant].push_back(c.sr);
        std::map<std::string, std::pair<double, double>> out;
        for (const auto& [k, v] : by) {
            double mean = 0;
            for (double x : v) mean += x;
            mean /= double(v.size());
            double var = 0;
            for (double x : v) var += (x - mean) * (x - mean);
            const double stdev = v.size() > 1 ? std::sqrt(var / double(v.size() - 1)) : 0.0;
            out[k] = {mean, stdev};
        }
        return out;
    }

    void write_csv(const std::string& path) const {
        std::ofstream f(path);
        TD_CHECK(f.good(), "cannot write ablation csv: " + path);
        f << "variant,sr_mean,sr_std,seeds,failures\n";
        const auto agg = aggregate();
        std::map<std::string, size_t> fails, counts;
        for (const auto& c : cells) {
            counts[c.variant] += 1;
            if (!c.ok) fails[c.variant] += 1;
        }
        for (const auto& [k, ms] : agg)
            f << k << "," << fmt_g(ms.first) << "," << fmt_g(ms.second) << ","
              << counts[k] - fails[k] << "," << fails[k] << "\n";
        for (const auto& [k, n] : counts)
            if (!agg.count(k)) f << k << ",nan,nan,0," << fails[k] << "\n";
    }
};

// trains one ablation cell end to end and evaluates it
template <typename T = float>
AblationCell run_ablation_cell(const datastore::Dataset& ds, TrainConfig base,
                               const AblationVariant& variant, uint64_t seed,
                               const std::string& work_dir, const std::string& wm_dir,
                               size_t eval_episodes, size_t eval_workers = 1) {
    AblationCell cell;
    cell.variant = variant.name;
    cell.seed = seed;
    try {
        TrainConfig cfg = base;
        cfg.seed = seed;
        cfg.disable_hsa = variant.disable_hsa;
        cfg.disable_dream = variant.disable_dream;
        cfg.disable_tactile = variant.disable_tactile;
        cfg.dream_predicts_vision = variant.dream_predicts_vision;
        if (!variant.wm_size.empty()) cfg.wm_size = variant.wm_size;
        if (variant.data_fraction >= 0) cfg.data_fraction = variant.data_fraction;

        namespace fs = std::filesystem;
        fs::create_directories(work_dir);

        cfg.stage = 1;
        Trainer<T> t1(ds, cfg);
        t1.train_stage1(work_dir + "/stage1");
        std::string final_dir = work_dir + "/stage1";

        if (!cfg.disable_dream && !cfg.disable_tactile) {
            std::string wm_use = wm_dir;
            if (wm_use.empty() || !variant.wm_size.empty() || variant.data_fraction >= 0) {
                // this cell needs its own world model (different size or data)
                TrainConfig wm_cfg = cfg;
                Trainer<T> tw(ds, wm_cfg);
                tw.pretrain_wm(work_dir + "/wm");
                wm_use = work_dir + "/wm";
            }
            cfg.stage = 2;
            Trainer<T> t2(ds, cfg);
            t2.train_stage2(work_dir + "/stage2", work_dir + "/stage1", wm_use);
            final_dir = work_dir + "/stage2";
        }

        auto mc = model::PolicyModel<T>::peek_config(final_dir);
        model::PolicyModel<T> m(mc, 0);
        m.load_params(final_dir);
        if (mc.use_dream) m.wm().freeze();
        const auto task = simworld::task_from_name(cfg.task == "all" ? "peg_in_hole" : cfg.task);
        cell.report = evalharness::evaluate(m, task, eval_episodes, {seed}, eval_workers);
        cell.sr = cell.report.sr_mean;
        cell.ok = true;
    } catch (const std::exception& e) {
        cell.ok = false;
        cell.error = e.what();
    }
    return cell;
}

// the grid runner: variants x seeds, with one shared world model per seed;
// failed cells are recorded and the table still comes out
template <typename T = float>
AblationTable run_ablation(const datastore::Dataset& ds, const TrainConfig& base,
                           const std::vector<AblationVariant>& variants,
                           const std::vector<uint64_t>& seeds, const std::string& out_dir,
                           size_t eval_episodes = 100, size_t workers = 1) {
    TD_CHECK(!variants.empty() && !seeds.empty(), "run_ablation: empty grid");
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    // shared world-model pretraining per seed (only cells with the base wm
    // size and base data fraction reuse it)
    std::vector<std::string> wm_dirs(seeds.size());
    bool any_dream = false;
    for (const auto& v : variants)
        any_dream = any_dream ||
                    (!v.disable_dream && !v.disable_tactile && v.wm_size.empty() &&
                     v.data_fraction < 0);
    threading::parallel_for(seeds.size(), workers, [&](size_t si) {
        if (!any_dream) return;
        TrainConfig cfg = base;
        cfg.seed = seeds[si];
        Trainer<T> tw(ds, cfg);
        const std::string dir = out_dir + "/wm_seed" + std::to_string(seeds[si]);
        tw.pretrain_wm(dir);
        wm_dirs[si] = dir;
    });

    AblationTable table;
    table.cells.resize(variants.size() * seeds.size());
    threading::parallel_for(table.cells.size(), workers, [&](size_t i) {
        const size_t vi = i / seeds.size(), si = i % seeds.size();
        const std::string cell_dir =
            out_dir + "/" + variants[vi].name + "_seed" + std::to_string(seeds[si]);
        table.cells[i] = run_ablation_cell<T>(ds, base, variants[vi], seeds[si], cell_dir,
                                              wm_dirs[si], eval_episodes, 1);
    });
    table.write_csv(out_dir + "/ablation.csv");
    return table;
}

} // namespace tacdream::training

namespace tacdream::evalharness {

struct ScalingPoint {
    double fraction = 0;
    double sr_mean = 0, sr_std = 0;
};

// trains the full pipeline per fraction x seed and evaluates; emits curve.csv
template <typename T = float>
std::vector<ScalingPoint> scaling_study(const datastore::Dataset& ds,
                                        const training::TrainConfig& base,
                                        const std::vector<double>& fractions,
                                        const std::vector<uint64_t>& seeds,
                                        const std::string& out_dir, size_t eval_episodes = 100,
                                        size_t workers = 1) {
    TD_CHECK(!fractions.empty(), "scaling_study: no fractions");
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    std::vector<std::vector<double>> srs(fractions.size());
    for (auto& v : srs) v.resize(seeds.size());
    std::vector<bool> ok(fractions.size() * seeds.size(), false);

    threading::parallel_for(fractions.size() * seeds.size(), workers, [&](size_t i) {
        const size_t fi = i / seeds.size(), si = i % seeds.size();
        training::AblationVariant v{"full", false, false, false};
        v.data_fraction = fractions[fi];
        char name[96];
        std::snprintf(name, sizeof(name), "/frac%03d_seed%llu", int(fractions[fi] * 100 + 0.5),
                      (unsigned long long)seeds[si]);
        auto cell = training::run_ablation_cell<T>(ds, base, v, seeds[si], out_dir + name, "",
                                                   eval_episodes, 1);
        srs[fi][si] = cell.sr;
        ok[i] = cell.ok;
    });

    std::vector<ScalingPoint> points;
    std::ofstream csv(out_dir + "/curve.csv");
    csv << "fraction,sr_mean,sr_std\n";
    for (size_t fi = 0; fi < fractions.size(); ++fi) {
        ScalingPoint p;
        p.fraction = fractions[fi];
        double mean = 0;
        size_t n = 0;
        for (size_t si = 0; si < seeds.size(); ++si)
            if (ok[fi * seeds.size() + si]) {
                mean += srs[fi][si];
                ++n;
            }
        TD_CHECK(n > 0, "scaling_study: all runs failed for a fraction");
        mean /= double(n);
        double var = 0;
        for (size_t si = 0; si < seeds.size(); ++si)
            if (ok[fi * seeds.size() + si]) var += (srs[fi][si] - mean) * (srs[fi][si] - mean);
        p.sr_mean = mean;
        p.sr_std = n > 1 ? std::sqrt(var / double(n - 1)) : 0.0;
        points.push_back(p);
        csv << training::fmt_g(p.fraction) << "," << training::fmt_g(p.sr_mean) << ","
            << training::fmt_g(p.sr_std) << "\n";
    }
    return points;
}

} // namespace tacdream::evalharness
