#include <catch2/catch_amalgamated.hpp>

#include "tacdream/forecaster.hpp"

#include "helpers.hpp"

using namespace tacdream;
using namespace tacdream::forecaster;
using diffcore::TensorD;
using diffcore::TensorF;
using tdtest::check_grads;

TEST_CASE("null dream is exactly zero") {
    auto d = null_dream<float>(16, 128);
    CHECK(d.provenance == Provenance::null);
    for (float v : d.patches.value()) CHECK(v == 0.0f);
    for (float v : d.pooled.value()) CHECK(v == 0.0f);
}

TEST_CASE("dream shape, determinism and gradients") {
    Rng rng(1);
    nn::ParamStore<float> ps;
    Forecaster<float> fc(ps, 16, 32, 4, rng, 64, 8);
    std::vector<float> zd(16 * 32), cd(4 * 7);
    for (auto& v : zd) v = float(rng.uniform(-1, 1));
    for (auto& v : cd) v = float(rng.uniform(-1, 1));
    auto z = TensorF::from_data({16, 32}, zd);
    auto chunk = TensorF::from_data({4, 7}, cd);

    auto d1 = fc.dream(z, chunk);
    auto d2 = fc.dream(z, chunk);
    CHECK(d1.provenance == Provenance::predicted);
    CHECK(d1.patches.shape() == z.shape());
    CHECK(d1.patches.value() == d2.patches.value());

    auto dv = fc.dream_vision(z, chunk);
    CHECK(dv.shape() == diffcore::Shape{8, 32});

    auto bad = TensorF::zeros({3, 7});
    CHECK_THROWS(fc.dream(z, bad));

    // gradient check through both inputs, double precision
    Rng drng(2);
    for (int rep = 0; rep < 20; ++rep) {
        nn::ParamStore<double> psd;
        Forecaster<double> fcd(psd, 4, 8, 2, drng, 16, 4);
        std::vector<double> zdd(4 * 8), cdd(2 * 7), wd(4 * 8);
        for (auto& v : zdd) v = drng.uniform(-1, 1);
        for (auto& v : cdd) v = drng.uniform(-1, 1);
        for (auto& v : wd) v = drng.uniform(-1, 1);
        auto zt = TensorD::from_data({4, 8}, zdd, true);
        auto ct = TensorD::from_data({2, 7}, cdd, true);
        auto w = TensorD::from_data({4, 8}, wd);
        auto rep_out = check_grads({zt, ct, psd.get("forecaster.fc1.w")}, [&] {
            return diffcore::sum_all(diffcore::mul(fcd.dream(zt, ct).patches, w));
        }, drng, 1e-3, 1e-3, 3);
        INFO(rep_out.detail);
        CHECK(rep_out.ok);
    }
}

TEST_CASE("forecasting loss analytic cases") {
    Rng rng(3);
    // identity: exactly zero
    std::vector<double> xd(4 * 8);
    for (auto& v : xd) v = rng.uniform(-1, 1);
    auto x = TensorD::from_data({4, 8}, xd);
    CHECK(double(forecasting_loss<double>(x, x).item()) == 0.0);

    // pred = -target with unit-norm rows: elementwise mean is 4/D
    const size_t D = 8;
    std::vector<double> u1(D, 0), u2(D, 0);
    u1[2] = 1.0;
    u2[5] = -1.0;
    std::vector<double> t;
    t.insert(t.end(), u1.begin(), u1.end());
    t.insert(t.end(), u2.begin(), u2.end());
    std::vector<double> p;
    for (double v : t) p.push_back(-v);
    auto target = TensorD::from_data({2, D}, t);
    auto pred = TensorD::from_data({2, D}, p);
    // independent arithmetic: sum over patches of |u - (-u)|^2 = 4 per patch,
    // divided by P*D elements
    const double expect = (4.0 + 4.0) / double(2 * D);
    CHECK(double(forecasting_loss<double>(pred, target).item()) ==
          Catch::Approx(expect).margin(1e-12));
    CHECK(expect == Catch::Approx(4.0 / double(D)).margin(1e-15));
}

TEST_CASE("forecasting loss matches a brute-force oracle") {
    Rng rng(4);
    for (int rep = 0; rep < 30; ++rep) {
        const size_t P = 3, D = 10;
        std::vector<double> pd(P * D), td(P * D);
        for (auto& v : pd) v = rng.uniform(-1, 1);
        for (auto& v : td) v = rng.uniform(-1, 1);
        auto p = TensorD::from_data({P, D}, pd);
        auto t = TensorD::from_data({P, D}, td);

        double want = 0;
        for (size_t i = 0; i < P; ++i) {
            double np = 0, nt = 0;
            for (size_t j = 0; j < D; ++j) {
                np += pd[i * D + j] * pd[i * D + j];
                nt += td[i * D + j] * td[i * D + j];
            }
            np = std::sqrt(np + 1e-12);
            nt = std::sqrt(nt + 1e-12);
            for (size_t j = 0; j < D; ++j) {
                const double d = pd[i * D + j] / np - td[i * D + j] / nt;
                want += d * d;
            }
        }
        want /= double(P * D);
        CHECK(double(forecasting_loss<double>(p, t).item()) ==
              Catch::Approx(want).margin(1e-6));
        CHECK(double(forecasting_loss<double>(p, t).item()) >= 0.0);
    }
}

TEST_CASE("no gradient reaches the target side") {
    Rng rng(5);
    std::vector<double> pd(4 * 8), td(4 * 8);
    for (auto& v : pd) v = rng.uniform(-1, 1);
    for (auto& v : td) v = rng.uniform(-1, 1);
    auto p = TensorD::from_data({4, 8}, pd, true);
    auto t = TensorD::from_data({4, 8}, td, true);
    auto loss = forecasting_loss<double>(p, t);
    loss.backward();
    CHECK(t.grad_raw().empty());  // never touched by backward
    double pg = 0;
    for (double v : p.grad()) pg += std::abs(v);
    CHECK(pg > 0);

    // gradient check on the prediction side
    auto rep = check_grads({p}, [&] { return forecasting_loss<double>(p, t); }, rng);
    INFO(rep.detail);
    CHECK(rep.ok);
}
