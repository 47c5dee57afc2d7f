#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace kronsmooth {

inline std::atomic<unsigned>& thread_limit() {
    static std::atomic<unsigned> n{1};
    return n;
}

/// Caps the worker count used by library loops. 1 means fully serial.
inline void set_num_threads(unsigned n) { thread_limit() = std::max(1u, n); }
inline unsigned num_threads() { return thread_limit(); }

/// Runs fn(i) for i in [0, n). Each index is handled by exactly one worker and
/// results must be written to index-owned slots; callers reduce in index order.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const std::size_t workers = std::min<std::size_t>(num_threads(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += workers) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace kronsmooth
