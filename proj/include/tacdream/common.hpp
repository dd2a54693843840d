#pragma once

#include <cmath>
#include <cstdint>
#include <chrono>
#include <stdexcept>
#include <string>

namespace tacdream {

inline constexpr const char* kVersion = "0.1.0";

namespace detail {
[[noreturn]] inline void fail(const char* file, int line, const std::string& msg) {
    throw std::runtime_error(std::string(file) + ":" + std::to_string(line) + ": " + msg);
}
} // namespace detail

#define TD_CHECK(cond, msg)                                        \
    do {                                                           \
        if (!(cond)) {                                             \
            ::tacdream::detail::fail(__FILE__, __LINE__, (msg));   \
        }                                                          \
    } while (0)

// Counter-based splittable RNG. Every draw is a pure hash of (key, counter),
// so streams are reproducible across platforms and independent after split().
class Rng {
public:
    explicit Rng(uint64_t seed) : key_(mix(seed ^ 0x5851F42D4C957F2DULL)) {}

    Rng split(uint64_t tag) const {
        Rng child(0);
        child.key_ = mix(key_ ^ mix(tag + 0x9E3779B97F4A7C15ULL));
        child.ctr_ = 0;
        return child;
    }

    uint64_t next_u64() { return mix(key_ + (++ctr_) * 0x9E3779B97F4A7C15ULL); }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller; consumes exactly two draws
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // uniform integer in [0, n); fixed-point multiply keeps it branch-free
    uint64_t uniform_int(uint64_t n) {
        return uint64_t((__uint128_t(next_u64()) * __uint128_t(n)) >> 64);
    }

    uint64_t key() const { return key_; }
    uint64_t counter() const { return ctr_; }
    void set_counter(uint64_t c) { ctr_ = c; }

private:
    static uint64_t mix(uint64_t z) {
        z += 0x9E3779B97F4A7C15ULL;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    uint64_t key_ = 0;
    uint64_t ctr_ = 0;
};

class StopWatch {
public:
    StopWatch() : start_(std::chrono::steady_clock::now()) {}
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }
private:
    std::chrono::steady_clock::time_point start_;
};

} // namespace tacdream
