#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "tacdream/datastore.hpp"

using namespace tacdream;
using namespace tacdream::datastore;
namespace fs = std::filesystem;

namespace {

std::string fresh_dir(const std::string& name) {
    const std::string d = "tmp_" + name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

std::vector<char> slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

bool dirs_identical(const fs::path& a, const fs::path& b) {
    std::vector<fs::path> fa, fb;
    for (auto& e : fs::recursive_directory_iterator(a))
        if (e.is_regular_file()) fa.push_back(fs::relative(e.path(), a));
    for (auto& e : fs::recursive_directory_iterator(b))
        if (e.is_regular_file()) fb.push_back(fs::relative(e.path(), b));
    std::sort(fa.begin(), fa.end());
    std::sort(fb.begin(), fb.end());
    if (fa != fb) return false;
    for (const auto& rel : fa)
        if (slurp(a / rel) != slurp(b / rel)) return false;
    return true;
}

} // namespace

TEST_CASE("dtep tensor file roundtrip") {
    const std::string dir = fresh_dir("dtep");
    std::vector<float> data(2 * 3 * 4);
    for (size_t i = 0; i < data.size(); ++i) data[i] = float(i) * 0.25f - 1.0f;
    save_dtep(dir + "/t.dtep", {2, 3, 4}, data.data());
    auto [shape, back] = load_dtep(dir + "/t.dtep");
    CHECK(shape == std::vector<size_t>{2, 3, 4});
    CHECK(back == data);
    fs::remove_all(dir);
}

TEST_CASE("record episodes and manifest bookkeeping") {
    const std::string d1 = fresh_dir("rec1");
    record_episodes(d1, simworld::Task::peg_in_hole, 3, 100);
    {
        std::ifstream f(d1 + "/manifest.json");
        auto manifest = nlohmann::json::parse(f);
        CHECK(manifest["tasks"]["peg_in_hole"] == 3);
        CHECK(manifest["episodes"].size() == 3);
        size_t dirs = 0;
        for (auto& e : fs::directory_iterator(d1))
            if (e.is_directory()) ++dirs;
        CHECK(dirs == 3);
    }
    // appending a second task updates counts
    record_episodes(d1, simworld::Task::tool_stabilize, 2, 500);
    {
        std::ifstream f(d1 + "/manifest.json");
        auto manifest = nlohmann::json::parse(f);
        CHECK(manifest["tasks"]["tool_stabilize"] == 2);
        CHECK(manifest["episodes"].size() == 5);
    }

    // byte-identical re-recording
    const std::string d2 = fresh_dir("rec2");
    record_episodes(d2, simworld::Task::peg_in_hole, 3, 100);
    record_episodes(d2, simworld::Task::tool_stabilize, 2, 500);
    CHECK(dirs_identical(d1, d2));
    fs::remove_all(d2);

    // roundtrip: load reproduces the in-memory rollout bit-exactly
    Dataset ds = Dataset::load(d1);
    REQUIRE(ds.num_episodes() == 5);
    simworld::Env env(simworld::Task::peg_in_hole);
    // first recorded peg episode used the first successful seed from 100
    uint64_t seed = 100;
    EpisodeRecord ref = rollout_expert(env, seed);
    while (!ref.success) ref = rollout_expert(env, ++seed);
    const EpisodeRecord& got = ds.episode(0);
    CHECK(got.length == ref.length);
    CHECK(got.tpv == ref.tpv);
    CHECK(got.wrist == ref.wrist);
    CHECK(got.tactile == ref.tactile);
    CHECK(got.action == ref.action);
    CHECK(got.sensor_pose == ref.sensor_pose);
    CHECK(got.success);

    fs::remove_all(d1);
}

TEST_CASE("batch assembly: padding, future frame, bbox recompute") {
    const std::string d = fresh_dir("batch");
    record_episodes(d, simworld::Task::peg_in_hole, 2, 40);
    Dataset ds = Dataset::load(d);
    const auto& ep = ds.episode(0);
    const size_t T = ep.length;
    REQUIRE(T >= 6);

    // chunk at the last step: H copies of the final action
    auto b_end = load_batch(ds, {{0, T - 1}}, 4, 3);
    for (size_t j = 0; j < 4; ++j)
        for (int dd = 0; dd < 7; ++dd)
            CHECK(b_end.target_chunk[j * 7 + dd] == ep.action[(T - 1) * 7 + dd]);
    // future tactile clamps to the last frame
    for (size_t i = 0; i < EpisodeRecord::frame_len(ep.tac_size); ++i)
        CHECK(b_end.future_tactile[i] == ep.tactile_frame(T - 1)[i]);

    // H=1: the chunk is the single expert action
    auto b_one = load_batch(ds, {{0, 2}}, 1, 1);
    for (int dd = 0; dd < 7; ++dd) CHECK(b_one.target_chunk[dd] == ep.action[2 * 7 + dd]);

    // bboxes equal direct recomputation from the stored poses and cameras
    Rng rng(5);
    for (int rep = 0; rep < 20; ++rep) {
        const size_t t = rng.uniform_int(T);
        auto b = load_batch(ds, {{0, t}}, 4, 3);
        const auto sp = ep.sensor_pose_at(t);
        const auto ref_w = geometry::sensor_bbox(ep.wrist_cam_at(t), sp, {0.008, 0.008, 0.004});
        const auto ref_tp = geometry::sensor_bbox(ep.tpv_cam, sp, {0.008, 0.008, 0.004});
        CHECK(b.bbox_wrist[0].valid == ref_w.valid);
        if (ref_w.valid) {
            CHECK(b.bbox_wrist[0].min_u == ref_w.min_u);
            CHECK(b.bbox_wrist[0].max_v == ref_w.max_v);
        }
        CHECK(b.bbox_tpv[0].valid == ref_tp.valid);
    }

    // errors
    CHECK_THROWS(load_batch(ds, {{0, T}}, 4, 3));
    CHECK_THROWS(load_batch(ds, {{7, 0}}, 4, 3));
    CHECK_THROWS(load_batch(ds, {{0, 0}}, 0, 3));

    // deterministic assembly
    auto b1 = load_batch(ds, {{0, 1}, {1, 2}}, 4, 3);
    auto b2 = load_batch(ds, {{0, 1}, {1, 2}}, 4, 3);
    CHECK(b1.tpv == b2.tpv);
    CHECK(b1.target_chunk == b2.target_chunk);
    fs::remove_all(d);
}

TEST_CASE("scaling subsets are stratified and nested") {
    const std::string d = fresh_dir("subset");
    record_episodes(d, simworld::Task::peg_in_hole, 10, 40);
    record_episodes(d, simworld::Task::tool_stabilize, 5, 40);
    Dataset ds = Dataset::load(d);

    auto full = ds.subset(1.0, 7);
    CHECK(full.size() == 15);

    auto s20 = ds.subset(0.2, 7);
    size_t peg = 0, tool = 0;
    for (size_t i : s20)
        (ds.episode(i).task == simworld::Task::peg_in_hole ? peg : tool) += 1;
    CHECK(peg == 2);
    CHECK(tool == 1);

    auto s40 = ds.subset(0.4, 7);
    auto s60 = ds.subset(0.6, 7);
    auto contains = [](const std::vector<size_t>& big, const std::vector<size_t>& small) {
        for (size_t x : small)
            if (std::find(big.begin(), big.end(), x) == big.end()) return false;
        return true;
    };
    CHECK(contains(s40, s20));
    CHECK(contains(s60, s40));

    CHECK(ds.subset(0.2, 7) == s20);  // deterministic
    CHECK_THROWS(ds.subset(0.3, 7));
    fs::remove_all(d);
}
