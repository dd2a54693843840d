#pragma once

// Small deterministic work-splitting helper: results are indexed by work
// item, so aggregation order never depends on scheduling.

#include <atomic>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

#include "tacdream/common.hpp"

namespace tacdream::threading {

inline void parallel_for(size_t n, size_t workers, const std::function<void(size_t)>& fn) {
    if (n == 0) return;
    workers = std::max<size_t>(1, std::min(workers, n));
    if (workers == 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr first_error = nullptr;
    std::mutex err_mu;
    for (size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            while (true) {
                const size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lk(err_mu);
                    if (!first_error) first_error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

} // namespace tacdream::threading
