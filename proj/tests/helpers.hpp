#pragma once

// Shared test utilities: the central-finite-difference gradient checker (run
// in double precision) and random pose/camera generators.

#include <functional>
#include <string>
#include <vector>

#include "tacdream/common.hpp"
#include "tacdream/diffcore.hpp"
#include "tacdream/geometry.hpp"

namespace tdtest {

using tacdream::Rng;
using tacdream::diffcore::TensorD;

struct GradCheckReport {
    bool ok = true;
    double worst_rel = 0.0;
    std::string detail;
};

// Compares reverse-mode gradients of a scalar-valued forward function against
// central finite differences at eps, on a sample of coordinates per leaf.
// Pass criterion: |ad - fd| <= tol * max(tol, |ad|, |fd|). When a coordinate
// misses at the base eps, it is re-checked at eps/4: central differences have
// O(eps^2) truncation error, so a gradient that agrees with the sharper
// estimate is correct at the stated tolerance even where the base step is
// curvature-limited.
inline GradCheckReport check_grads(std::vector<TensorD> leaves,
                                   const std::function<TensorD()>& fwd, Rng& rng,
                                   double eps = 1e-3, double tol = 1e-3,
                                   size_t coords_per_leaf = 4) {
    GradCheckReport rep;
    for (auto& leaf : leaves) leaf.zero_grad();
    TensorD loss = fwd();
    loss.backward();
    std::vector<std::vector<double>> ad;
    for (auto& leaf : leaves) ad.push_back(leaf.grad());

    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& leaf = leaves[li];
        const size_t n = leaf.numel();
        for (size_t pick = 0; pick < std::min(coords_per_leaf, n); ++pick) {
            const size_t ci = size_t(rng.uniform_int(n));
            const double a = ad[li][ci];
            auto central_diff = [&](double step) {
                const double orig = leaf.value()[ci];
                leaf.value()[ci] = orig + step;
                const double f_plus = fwd().item();
                leaf.value()[ci] = orig - step;
                const double f_minus = fwd().item();
                leaf.value()[ci] = orig;
                return (f_plus - f_minus) / (2.0 * step);
            };
            auto rel_err = [&](double fd) {
                return std::abs(a - fd) / std::max({tol, std::abs(a), std::abs(fd)});
            };
            double rel = rel_err(central_diff(eps));
            if (rel > tol) rel = rel_err(central_diff(eps / 4.0));
            rep.worst_rel = std::max(rep.worst_rel, rel);
            if (rel > tol) {
                rep.ok = false;
                rep.detail += "leaf " + std::to_string(li) + " coord " + std::to_string(ci) +
                              ": ad=" + std::to_string(a) +
                              " rel=" + std::to_string(rel) + "; ";
            }
        }
    }
    return rep;
}

inline tacdream::geometry::Pose random_pose(Rng& rng, double t_range = 0.5) {
    using namespace tacdream::geometry;
    // random axis-angle via Rodrigues
    double ax = rng.normal(), ay = rng.normal(), az = rng.normal();
    const double len = std::sqrt(ax * ax + ay * ay + az * az) + 1e-12;
    ax /= len;
    ay /= len;
    az /= len;
    const double th = rng.uniform(0, 3.14159265358979);
    const double c = std::cos(th), s = std::sin(th), v = 1 - c;
    Mat3 r = {c + ax * ax * v,      ax * ay * v - az * s, ax * az * v + ay * s,
              ay * ax * v + az * s, c + ay * ay * v,      ay * az * v - ax * s,
              az * ax * v - ay * s, az * ay * v + ax * s, c + az * az * v};
    Pose p;
    p.rotation = r;
    p.translation = {rng.uniform(-t_range, t_range), rng.uniform(-t_range, t_range),
                     rng.uniform(-t_range, t_range)};
    return p;
}

// independent projection oracle: build the 3x4 homogeneous matrix P = K [R|t]
// and divide by the third coordinate
struct HomogeneousOracle {
    std::array<double, 12> P;

    explicit HomogeneousOracle(const tacdream::geometry::CameraModel& cam) {
        const auto& R = cam.world_to_cam.rotation;
        const auto& t = cam.world_to_cam.translation;
        const double K[9] = {cam.fx, 0, cam.cx, 0, cam.fy, cam.cy, 0, 0, 1};
        double Rt[12] = {R[0], R[1], R[2], t[0], R[3], R[4], R[5], t[1], R[6], R[7], R[8], t[2]};
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 4; ++j) {
                double s = 0;
                for (int k = 0; k < 3; ++k) s += K[i * 3 + k] * Rt[k * 4 + j];
                P[i * 4 + j] = s;
            }
    }

    // returns (u, v, w) with w the depth coordinate
    std::array<double, 3> project(const tacdream::geometry::Vec3& p) const {
        const double x[4] = {p[0], p[1], p[2], 1.0};
        double r[3];
        for (int i = 0; i < 3; ++i) {
            double s = 0;
            for (int j = 0; j < 4; ++j) s += P[i * 4 + j] * x[j];
            r[i] = s;
        }
        return {r[0] / r[2], r[1] / r[2], r[2]};
    }
};

} // namespace tdtest
