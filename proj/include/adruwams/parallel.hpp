#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace adruwams {

namespace detail {
inline std::atomic<unsigned>& thread_setting() {
    static std::atomic<unsigned> n{std::max(1u, std::thread::hardware_concurrency())};
    return n;
}
} // namespace detail

inline unsigned num_threads() { return detail::thread_setting().load(); }
inline void set_num_threads(unsigned n) { detail::thread_setting().store(std::max(1u, n)); }

/// Runs fn(i) for every i in [0, n), statically partitioned into contiguous
/// blocks. Each index is visited exactly once, so kernels that write only to
/// the outputs owned by index i are bitwise deterministic for any thread count.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const std::size_t workers = std::min<std::size_t>(num_threads(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::exception_ptr err;
    std::mutex err_mu;
    {
        std::vector<std::jthread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            const std::size_t lo = n * w / workers, hi = n * (w + 1) / workers;
            pool.emplace_back([&, lo, hi] {
                try {
                    for (std::size_t i = lo; i < hi; ++i) fn(i);
                } catch (...) {
                    std::lock_guard lk(err_mu);
                    if (!err) err = std::current_exception();
                }
            });
        }
    }
    if (err) std::rethrow_exception(err);
}

} // namespace adruwams
