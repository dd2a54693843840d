#pragma once

// Episode recording and reading. One directory per episode: meta.json plus
// stacked little-endian f32 tensor files (16-byte DTEP header) with a leading
// time dimension. A manifest.json at the dataset root lists per-task counts,
// the allowed scaling fractions, and the simulator config hash.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tacdream/common.hpp"
#include "tacdream/geometry.hpp"
#include "tacdream/simworld.hpp"

namespace tacdream::datastore {

static_assert(std::endian::native == std::endian::little,
              "on-disk tensor format assumes a little-endian host");

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// DTEP tensor files: magic "DTEP", u32 rank, 4 x u16 dims, then f32 payload
// ---------------------------------------------------------------------------

inline void save_dtep(const std::string& path, const std::vector<size_t>& shape,
                      const float* data) {
    TD_CHECK(shape.size() >= 1 && shape.size() <= 4, "dtep: rank must be 1..4");
    std::ofstream f(path, std::ios::binary);
    TD_CHECK(f.good(), "cannot write tensor file: " + path);
    f.write("DTEP", 4);
    const uint32_t rank = uint32_t(shape.size());
    f.write(reinterpret_cast<const char*>(&rank), 4);
    size_t numel = 1;
    for (size_t i = 0; i < 4; ++i) {
        const uint16_t d = i < shape.size() ? uint16_t(shape[i]) : 0;
        if (i < shape.size()) {
            TD_CHECK(shape[i] > 0 && shape[i] < 65536, "dtep: dim out of range");
            numel *= shape[i];
        }
        f.write(reinterpret_cast<const char*>(&d), 2);
    }
    f.write(reinterpret_cast<const char*>(data), std::streamsize(numel * sizeof(float)));
    TD_CHECK(f.good(), "tensor write failed: " + path);
}

inline std::pair<std::vector<size_t>, std::vector<float>> load_dtep(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    TD_CHECK(f.good(), "cannot open tensor file: " + path);
    char magic[4];
    f.read(magic, 4);
    TD_CHECK(f.good() && std::memcmp(magic, "DTEP", 4) == 0, "bad tensor magic: " + path);
    uint32_t rank = 0;
    f.read(reinterpret_cast<char*>(&rank), 4);
    TD_CHECK(rank >= 1 && rank <= 4, "bad tensor rank: " + path);
    std::vector<size_t> shape;
    size_t numel = 1;
    for (size_t i = 0; i < 4; ++i) {
        uint16_t d = 0;
        f.read(reinterpret_cast<char*>(&d), 2);
        if (i < rank) {
            shape.push_back(d);
            numel *= d;
        }
    }
    std::vector<float> data(numel);
    f.read(reinterpret_cast<char*>(data.data()), std::streamsize(numel * sizeof(float)));
    TD_CHECK(f.good(), "truncated tensor file: " + path);
    return {shape, data};
}

// ---------------------------------------------------------------------------
// episodes
// ---------------------------------------------------------------------------

struct EpisodeRecord {
    std::string name;
    simworld::Task task = simworld::Task::peg_in_hole;
    uint64_t seed = 0;
    bool success = false;
    size_t length = 0;

    // stacked per-step tensors
    std::vector<float> tpv;           // [T, img, img, 3]
    std::vector<float> wrist;         // [T, img, img, 3]
    std::vector<float> tactile;       // [T, tac, tac, 3]
    std::vector<float> proprio;       // [T, 7]
    std::vector<float> action;        // [T, 7]
    std::vector<float> sensor_pose;   // [T, 12], row-major R then t
    std::vector<float> wrist_cam;     // [T, 12], extrinsics per step
    std::vector<float> grasp_offset;  // [T, 2]
    std::vector<float> wrench;        // [T, 3]

    geometry::CameraModel tpv_cam;
    double wrist_fx = 0, wrist_fy = 0, wrist_cx = 0, wrist_cy = 0;
    int img_size = 64, tac_size = 32;

    const float* tpv_frame(size_t t) const { return tpv.data() + t * frame_len(img_size); }
    const float* wrist_frame(size_t t) const { return wrist.data() + t * frame_len(img_size); }
    const float* tactile_frame(size_t t) const { return tactile.data() + t * frame_len(tac_size); }
    static size_t frame_len(int n) { return size_t(n) * n * 3; }

    geometry::Pose sensor_pose_at(size_t t) const {
        geometry::Pose p;
        const float* d = sensor_pose.data() + t * 12;
        for (int i = 0; i < 9; ++i) p.rotation[i] = d[i];
        for (int i = 0; i < 3; ++i) p.translation[i] = d[9 + i];
        return p;
    }

    geometry::CameraModel wrist_cam_at(size_t t) const {
        geometry::CameraModel cam;
        cam.fx = wrist_fx;
        cam.fy = wrist_fy;
        cam.cx = wrist_cx;
        cam.cy = wrist_cy;
        cam.width = cam.height = img_size;
        const float* d = wrist_cam.data() + t * 12;
        for (int i = 0; i < 9; ++i) cam.world_to_cam.rotation[i] = d[i];
        for (int i = 0; i < 3; ++i) cam.world_to_cam.translation[i] = d[9 + i];
        return cam;
    }
};

inline uint64_t fnv1a(const std::string& s) {
    uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

inline std::string sim_config_hash(const simworld::SimParams& p) {
    std::string blob;
    blob.resize(sizeof(p));
    std::memcpy(blob.data(), &p, sizeof(p));
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)fnv1a(blob));
    return buf;
}

inline void save_episode(const std::string& dir, const EpisodeRecord& ep) {
    fs::create_directories(dir);
    json meta;
    meta["task"] = simworld::task_name(ep.task);
    meta["seed"] = ep.seed;
    meta["success"] = ep.success;
    meta["length"] = ep.length;
    meta["sim_version"] = kVersion;
    meta["source"] = "sim";
    meta["img_size"] = ep.img_size;
    meta["tac_size"] = ep.tac_size;
    meta["tpv_cam"] = geometry::camera_to_json(ep.tpv_cam);
    meta["wrist_intrinsics"] = {{"fx", ep.wrist_fx}, {"fy", ep.wrist_fy},
                                {"cx", ep.wrist_cx}, {"cy", ep.wrist_cy}};
    std::ofstream mf(dir + "/meta.json");
    mf << meta.dump(2) << "\n";
    TD_CHECK(mf.good(), "cannot write episode meta: " + dir);
    mf.close();

    const size_t T = ep.length;
    const size_t img = size_t(ep.img_size), tac = size_t(ep.tac_size);
    save_dtep(dir + "/tpv.dtep", {T, img, img, 3}, ep.tpv.data());
    save_dtep(dir + "/wrist.dtep", {T, img, img, 3}, ep.wrist.data());
    save_dtep(dir + "/tactile.dtep", {T, tac, tac, 3}, ep.tactile.data());
    save_dtep(dir + "/proprio.dtep", {T, 7}, ep.proprio.data());
    save_dtep(dir + "/action.dtep", {T, 7}, ep.action.data());
    save_dtep(dir + "/sensor_pose.dtep", {T, 12}, ep.sensor_pose.data());
    save_dtep(dir + "/wrist_cam.dtep", {T, 12}, ep.wrist_cam.data());
    save_dtep(dir + "/grasp_offset.dtep", {T, 2}, ep.grasp_offset.data());
    save_dtep(dir + "/wrench.dtep", {T, 3}, ep.wrench.data());
}

inline EpisodeRecord load_episode(const std::string& dir, const std::string& name) {
    EpisodeRecord ep;
    ep.name = name;
    std::ifstream mf(dir + "/meta.json");
    TD_CHECK(mf.good(), "cannot open episode meta: " + dir);
    json meta = json::parse(mf);
    ep.task = simworld::task_from_name(meta.at("task").get<std::string>());
    ep.seed = meta.at("seed").get<uint64_t>();
    ep.success = meta.at("success").get<bool>();
    ep.length = meta.at("length").get<size_t>();
    ep.img_size = meta.at("img_size").get<int>();
    ep.tac_size = meta.at("tac_size").get<int>();
    ep.tpv_cam = geometry::camera_from_json(meta.at("tpv_cam"));
    ep.wrist_fx = meta.at("wrist_intrinsics").at("fx").get<double>();
    ep.wrist_fy = meta.at("wrist_intrinsics").at("fy").get<double>();
    ep.wrist_cx = meta.at("wrist_intrinsics").at("cx").get<double>();
    ep.wrist_cy = meta.at("wrist_intrinsics").at("cy").get<double>();

    auto read = [&](const char* f) { return load_dtep(dir + "/" + f).second; };
    ep.tpv = read("tpv.dtep");
    ep.wrist = read("wrist.dtep");
    ep.tactile = read("tactile.dtep");
    ep.proprio = read("proprio.dtep");
    ep.action = read("action.dtep");
    ep.sensor_pose = read("sensor_pose.dtep");
    ep.wrist_cam = read("wrist_cam.dtep");
    ep.grasp_offset = read("grasp_offset.dtep");
    ep.wrench = read("wrench.dtep");
    TD_CHECK(ep.length > 0 && ep.proprio.size() == ep.length * 7, "corrupt episode: " + dir);
    return ep;
}

// roll the scripted expert in the environment, keeping the per-step
// observations; returns the episode whether or not it succeeded
inline EpisodeRecord rollout_expert(const simworld::Env& env, uint64_t seed) {
    EpisodeRecord ep;
    ep.task = env.task();
    ep.seed = seed;
    ep.img_size = env.params().img_size;
    ep.tac_size = env.params().tac_size;
    ep.tpv_cam = env.tpv_camera();

    simworld::WorldState s = env.reset(seed);
    bool first = true;
    while (!s.done) {
        const simworld::Observation obs = env.render(s);
        if (first) {
            ep.wrist_fx = obs.wrist_cam.fx;
            ep.wrist_fy = obs.wrist_cam.fy;
            ep.wrist_cx = obs.wrist_cam.cx;
            ep.wrist_cy = obs.wrist_cam.cy;
            first = false;
        }
        const simworld::Action a = env.scripted_expert(s);
        ep.tpv.insert(ep.tpv.end(), obs.tpv.begin(), obs.tpv.end());
        ep.wrist.insert(ep.wrist.end(), obs.wrist.begin(), obs.wrist.end());
        ep.tactile.insert(ep.tactile.end(), obs.tactile.begin(), obs.tactile.end());
        for (float p : obs.proprio) ep.proprio.push_back(p);
        for (double av : a.v) ep.action.push_back(float(av));
        for (int i = 0; i < 9; ++i) ep.sensor_pose.push_back(float(obs.sensor_pose.rotation[i]));
        for (int i = 0; i < 3; ++i) ep.sensor_pose.push_back(float(obs.sensor_pose.translation[i]));
        for (int i = 0; i < 9; ++i)
            ep.wrist_cam.push_back(float(obs.wrist_cam.world_to_cam.rotation[i]));
        for (int i = 0; i < 3; ++i)
            ep.wrist_cam.push_back(float(obs.wrist_cam.world_to_cam.translation[i]));
        ep.grasp_offset.push_back(float(s.grasp_offset[0]));
        ep.grasp_offset.push_back(float(s.grasp_offset[1]));
        for (double w : s.wrench) ep.wrench.push_back(float(w));
        ep.length += 1;

        const auto res = env.step(s, a);
        s = res.state;
    }
    ep.success = s.success;
    return ep;
}

// records n successful expert episodes (resampling seeds), appending to the
// dataset manifest; aborts when the expert succeeds on fewer than half of the
// attempted seeds
inline void record_episodes(const std::string& root, simworld::Task task, size_t n,
                            uint64_t seed0, const simworld::SimParams& params = {}) {
    TD_CHECK(n > 0, "record_episodes: n must be positive");
    fs::create_directories(root);
    const std::string manifest_path = root + "/manifest.json";
    json manifest;
    if (fs::exists(manifest_path)) {
        std::ifstream f(manifest_path);
        manifest = json::parse(f);
    } else {
        manifest["version"] = 1;
        manifest["sim_version"] = kVersion;
        manifest["source"] = "sim";
        manifest["fractions"] = {0.2, 0.4, 0.6, 0.8, 1.0};
        manifest["config_hash"] = sim_config_hash(params);
        manifest["episodes"] = json::array();
        manifest["tasks"] = json::object();
    }
    TD_CHECK(manifest.at("config_hash").get<std::string>() == sim_config_hash(params),
             "dataset was recorded with a different simulator config");

    simworld::Env env(task, params);
    size_t collected = 0, attempts = 0;
    uint64_t seed = seed0;
    while (collected < n) {
        EpisodeRecord ep = rollout_expert(env, seed);
        attempts += 1;
        if (ep.success) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%s_%05zu", simworld::task_name(task),
                          size_t(manifest["tasks"].value(simworld::task_name(task), 0)) + collected);
            ep.name = buf;
            save_episode(root + "/" + ep.name, ep);
            manifest["episodes"].push_back(ep.name);
            collected += 1;
        }
        seed += 1;
        TD_CHECK(attempts < 20 || collected * 2 >= attempts,
                 "expert success rate below 50% (" + std::to_string(collected) + "/" +
                     std::to_string(attempts) + " on task " + simworld::task_name(task) +
                     "); aborting data collection");
    }
    manifest["tasks"][simworld::task_name(task)] =
        size_t(manifest["tasks"].value(simworld::task_name(task), 0)) + collected;
    std::ofstream mf(manifest_path);
    mf << manifest.dump(2) << "\n";
    TD_CHECK(mf.good(), "cannot write manifest: " + manifest_path);
}

// ---------------------------------------------------------------------------
// dataset view + batches
// ---------------------------------------------------------------------------

class Dataset {
public:
    static Dataset load(const std::string& root) {
        Dataset ds;
        ds.root_ = root;
        std::ifstream f(root + "/manifest.json");
        TD_CHECK(f.good(), "cannot open dataset manifest in " + root);
        ds.manifest_ = json::parse(f);
        for (const auto& name : ds.manifest_.at("episodes")) {
            const std::string n = name.get<std::string>();
            ds.episodes_.push_back(load_episode(root + "/" + n, n));
        }
        return ds;
    }

    const json& manifest() const { return manifest_; }
    size_t num_episodes() const { return episodes_.size(); }
    const EpisodeRecord& episode(size_t i) const { return episodes_[i]; }
    const std::string& root() const { return root_; }

    std::vector<size_t> episodes_of(simworld::Task task) const {
        std::vector<size_t> out;
        for (size_t i = 0; i < episodes_.size(); ++i)
            if (episodes_[i].task == task) out.push_back(i);
        return out;
    }

    // deterministic episode-level subsample, stratified by task and nested
    // across fractions (the 20% set is a prefix of the 40% set, and so on)
    std::vector<size_t> subset(double fraction, uint64_t seed) const {
        const double allowed[] = {0.2, 0.4, 0.6, 0.8, 1.0};
        bool ok = false;
        for (double a : allowed) ok = ok || std::abs(fraction - a) < 1e-9;
        TD_CHECK(ok, "subset: fraction must be one of {0.2, 0.4, 0.6, 0.8, 1.0}");
        std::vector<size_t> out;
        for (simworld::Task task : {simworld::Task::peg_in_hole, simworld::Task::tool_stabilize}) {
            std::vector<size_t> ids = episodes_of(task);
            if (ids.empty()) continue;
            Rng rng = Rng(seed).split(0x5B5Eu + uint64_t(task));
            for (size_t i = ids.size(); i > 1; --i) {
                const size_t j = size_t(rng.uniform_int(i));
                std::swap(ids[i - 1], ids[j]);
            }
            const size_t keep = size_t(std::llround(fraction * double(ids.size())));
            ids.resize(std::max<size_t>(1, keep));
            out.insert(out.end(), ids.begin(), ids.end());
        }
        std::sort(out.begin(), out.end());
        return out;
    }

private:
    std::string root_;
    json manifest_;
    std::vector<EpisodeRecord> episodes_;
};

struct Batch {
    size_t size = 0;
    size_t H = 0, N = 0;
    int img_size = 64, tac_size = 32;
    std::vector<float> tpv, wrist, tactile;  // stacked [B, ...]
    std::vector<float> proprio;              // [B, 7]
    std::vector<int> prompt;                 // [B]
    std::vector<float> target_chunk;         // [B, H, 7]
    std::vector<float> future_tactile;       // [B, tac, tac, 3]
    std::vector<float> future_wrist;         // [B, img, img, 3]
    std::vector<geometry::BBox2D> bbox_tpv, bbox_wrist;
    std::vector<std::pair<size_t, size_t>> origin;  // (episode, t)
};

// assemble a batch for (episode, t) pairs: H-step expert chunk with
// end-padding, the tactile frame at t+N (clamped to the episode end), and the
// sensor bbox in both views recomputed from the stored poses
inline Batch load_batch(const Dataset& ds, const std::vector<std::pair<size_t, size_t>>& indices,
                        size_t H, size_t N,
                        const std::array<double, 3>& sensor_half_extents = {0.008, 0.008, 0.004}) {
    TD_CHECK(H >= 1 && N >= 1, "load_batch: H and N must be >= 1");
    Batch b;
    b.size = indices.size();
    b.H = H;
    b.N = N;
    for (const auto& [ei, t] : indices) {
        TD_CHECK(ei < ds.num_episodes(), "load_batch: episode index out of range");
        const EpisodeRecord& ep = ds.episode(ei);
        TD_CHECK(t < ep.length, "load_batch: step index out of range");
        b.img_size = ep.img_size;
        b.tac_size = ep.tac_size;
        const size_t img_len = EpisodeRecord::frame_len(ep.img_size);
        const size_t tac_len = EpisodeRecord::frame_len(ep.tac_size);
        b.tpv.insert(b.tpv.end(), ep.tpv_frame(t), ep.tpv_frame(t) + img_len);
        b.wrist.insert(b.wrist.end(), ep.wrist_frame(t), ep.wrist_frame(t) + img_len);
        b.tactile.insert(b.tactile.end(), ep.tactile_frame(t), ep.tactile_frame(t) + tac_len);
        b.proprio.insert(b.proprio.end(), ep.proprio.begin() + t * 7, ep.proprio.begin() + (t + 1) * 7);
        b.prompt.push_back(int(ep.task));
        for (size_t j = 0; j < H; ++j) {
            const size_t tj = std::min(t + j, ep.length - 1);
            b.target_chunk.insert(b.target_chunk.end(), ep.action.begin() + tj * 7,
                                  ep.action.begin() + (tj + 1) * 7);
        }
        const size_t tf = std::min(t + N, ep.length - 1);
        b.future_tactile.insert(b.future_tactile.end(), ep.tactile_frame(tf),
                                ep.tactile_frame(tf) + tac_len);
        b.future_wrist.insert(b.future_wrist.end(), ep.wrist_frame(tf),
                              ep.wrist_frame(tf) + img_len);
        const geometry::Pose sp = ep.sensor_pose_at(t);
        b.bbox_tpv.push_back(geometry::sensor_bbox(ep.tpv_cam, sp, sensor_half_extents));
        b.bbox_wrist.push_back(geometry::sensor_bbox(ep.wrist_cam_at(t), sp, sensor_half_extents));
        b.origin.emplace_back(ei, t);
    }
    return b;
}

} // namespace tacdream::datastore
