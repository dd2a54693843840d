#include <catch2/catch_amalgamated.hpp>

#include "tacdream/encoders.hpp"
#include "tacdream/simworld.hpp"

using namespace tacdream;
using namespace tacdream::encoders;
using diffcore::TensorF;

namespace {

struct TestObs {
    std::vector<float> tpv, wrist, tactile;
    std::array<float, 7> proprio{};
    int prompt = 0;

    EncoderInput input() const {
        EncoderInput in;
        in.tpv = tpv.data();
        in.wrist = wrist.data();
        in.tactile = tactile.data();
        in.proprio = proprio;
        in.prompt_id = prompt;
        return in;
    }
};

TestObs random_obs(Rng& rng) {
    TestObs o;
    o.tpv.resize(64 * 64 * 3);
    o.wrist.resize(64 * 64 * 3);
    o.tactile.resize(32 * 32 * 3);
    for (auto& v : o.tpv) v = float(rng.uniform(0, 1));
    for (auto& v : o.wrist) v = float(rng.uniform(0, 1));
    for (auto& v : o.tactile) v = float(rng.uniform(0, 1));
    for (auto& v : o.proprio) v = float(rng.uniform(-1, 1));
    return o;
}

} // namespace

TEST_CASE("token bookkeeping") {
    Rng rng(1);
    nn::ParamStore<float> ps;
    MultimodalEncoder<float> enc(ps, {}, rng);
    TestObs o = random_obs(rng);

    auto seq = enc.tokenize_image(o.tpv.data(), Modality::tpv);
    CHECK(seq.tokens.shape() == diffcore::Shape{64, 128});
    CHECK(seq.grid.front() == std::pair<int, int>(0, 0));
    CHECK(seq.grid.back() == std::pair<int, int>(7, 7));

    auto seq2 = enc.tokenize_image(o.tpv.data(), Modality::tpv);
    CHECK(seq.tokens.value() == seq2.tokens.value());

    auto [h_mid, h_align] = enc.encode(o.input(), nn::eval_ctx());
    CHECK(h_align.tokens.shape() == diffcore::Shape{146, 128});
    CHECK(h_mid.tokens.shape() == diffcore::Shape{146, 128});
    CHECK(h_align.count(Modality::prompt) == 1);
    CHECK(h_align.count(Modality::state) == 1);
    CHECK(h_align.count(Modality::tpv) == 64);
    CHECK(h_align.count(Modality::wrist) == 64);
    CHECK(h_align.count(Modality::tactile) == 16);
    CHECK(h_align.tags == h_mid.tags);

    // functional purity: interleaved encodes do not interact
    TestObs o2 = random_obs(rng);
    auto first = enc.encode(o.input(), nn::eval_ctx()).second.tokens.value();
    enc.encode(o2.input(), nn::eval_ctx());
    auto again = enc.encode(o.input(), nn::eval_ctx()).second.tokens.value();
    CHECK(first == again);

    // bad config rejected
    EncoderConfig bad;
    bad.mid_layer = 4;
    CHECK_THROWS(bad.validate());
}

TEST_CASE("patch embedding is permutation-equivariant before positions") {
    Rng rng(2);
    nn::ParamStore<float> ps;
    MultimodalEncoder<float> enc(ps, {}, rng);
    TestObs o = random_obs(rng);

    // swap two patch blocks in the image: rows of the linear embedding swap
    std::vector<float> swapped = o.tpv;
    auto copy_patch = [&](std::vector<float>& dst, const std::vector<float>& src, size_t pd,
                          size_t ps_) {
        const size_t pr_d = pd / 8, pc_d = pd % 8, pr_s = ps_ / 8, pc_s = ps_ % 8;
        for (size_t r = 0; r < 8; ++r)
            for (size_t c = 0; c < 8; ++c)
                for (int ch = 0; ch < 3; ++ch)
                    dst[((pr_d * 8 + r) * 64 + pc_d * 8 + c) * 3 + ch] =
                        src[((pr_s * 8 + r) * 64 + pc_s * 8 + c) * 3 + ch];
    };
    copy_patch(swapped, o.tpv, 3, 40);
    copy_patch(swapped, o.tpv, 40, 3);
    auto base = enc.patch_embed_only(o.tpv.data(), Modality::tpv);
    auto perm = enc.patch_embed_only(swapped.data(), Modality::tpv);
    for (size_t j = 0; j < 128; ++j) {
        CHECK(perm.value()[3 * 128 + j] == base.value()[40 * 128 + j]);
        CHECK(perm.value()[40 * 128 + j] == base.value()[3 * 128 + j]);
        CHECK(perm.value()[7 * 128 + j] == base.value()[7 * 128 + j]);
    }
}

TEST_CASE("tactile sensitivity of the aligned stream") {
    Rng rng(3);
    nn::ParamStore<float> ps;
    MultimodalEncoder<float> enc(ps, {}, rng);
    TestObs o = random_obs(rng);
    TestObs flat = o;
    std::fill(flat.tactile.begin(), flat.tactile.end(), 0.0f);

    auto a = enc.encode(o.input(), nn::eval_ctx()).second;
    auto b = enc.encode(flat.input(), nn::eval_ctx()).second;
    double diff = 0;
    for (size_t idx : a.indices_of(Modality::tactile))
        for (size_t j = 0; j < 128; ++j)
            diff += std::abs(a.tokens.value()[idx * 128 + j] - b.tokens.value()[idx * 128 + j]);
    CHECK(diff > 1e-3);
}

TEST_CASE("pool region") {
    Rng rng(4);
    nn::ParamStore<float> ps;
    MultimodalEncoder<float> enc(ps, {}, rng);
    TestObs o = random_obs(rng);
    auto [h_mid, h_align] = enc.encode(o.input(), nn::eval_ctx());

    // single-token mask: that token, normalized
    std::vector<bool> one(16, false);
    one[5] = true;
    auto pooled = MultimodalEncoder<float>::pool_region(h_mid, Modality::tactile, one);
    REQUIRE(pooled.has_value());
    const auto ids = h_mid.indices_of(Modality::tactile);
    double norm = 0;
    for (size_t j = 0; j < 128; ++j) {
        const double v = h_mid.tokens.value()[ids[5] * 128 + j];
        norm += v * v;
    }
    norm = std::sqrt(norm);
    for (size_t j = 0; j < 128; ++j)
        CHECK(pooled->value()[j] ==
              Catch::Approx(h_mid.tokens.value()[ids[5] * 128 + j] / norm).margin(1e-5));

    // unit norm within 1e-5
    auto all = MultimodalEncoder<float>::pool_region(h_mid, Modality::tactile, {});
    double n2 = 0;
    for (size_t j = 0; j < 128; ++j) n2 += double(all->value()[j]) * double(all->value()[j]);
    CHECK(std::sqrt(n2) == Catch::Approx(1.0).margin(1e-5));

    // brute-force oracle over an arbitrary mask
    std::vector<bool> mask(64, false);
    mask[3] = mask[17] = mask[42] = true;
    auto got = MultimodalEncoder<float>::pool_region(h_mid, Modality::wrist, mask);
    REQUIRE(got.has_value());
    const auto wids = h_mid.indices_of(Modality::wrist);
    std::vector<double> mean(128, 0);
    for (size_t sel : {3, 17, 42})
        for (size_t j = 0; j < 128; ++j) mean[j] += h_mid.tokens.value()[wids[sel] * 128 + j];
    double mn = 0;
    for (auto& v : mean) {
        v /= 3.0;
        mn += v * v;
    }
    mn = std::sqrt(mn);
    for (size_t j = 0; j < 128; ++j)
        CHECK(got->value()[j] == Catch::Approx(mean[j] / mn).margin(1e-5));

    // empty selection: absent for image views, an error for tactile
    std::vector<bool> none_w(64, false);
    CHECK_FALSE(
        MultimodalEncoder<float>::pool_region(h_mid, Modality::wrist, none_w).has_value());
    std::vector<bool> none_t(16, false);
    CHECK_THROWS(MultimodalEncoder<float>::pool_region(h_mid, Modality::tactile, none_t));
}

TEST_CASE("gradients reach all five modalities") {
    Rng rng(5);
    nn::ParamStore<float> ps;
    MultimodalEncoder<float> enc(ps, {}, rng);
    TestObs o = random_obs(rng);
    auto [h_mid, h_align] = enc.encode(o.input(), nn::eval_ctx());
    auto loss = diffcore::mean_all(diffcore::mul(h_align.tokens, h_align.tokens));
    loss.backward();
    for (const char* name : {"enc.patch.tpv.w", "enc.patch.wrist.w", "enc.patch.tactile.w",
                             "enc.state.w", "enc.prompt"}) {
        double g = 0;
        for (float v : ps.get(name).grad()) g += std::abs(v);
        INFO(name);
        CHECK(g > 0);
    }
}
