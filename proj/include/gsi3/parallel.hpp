#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace gsi3 {

namespace detail {
inline std::atomic<int>& thread_setting() {
    static std::atomic<int> n{1};
    return n;
}
} // namespace detail

/// Number of worker threads used by band-parallel loops. Results never depend on it.
inline int thread_count() { return detail::thread_setting().load(); }

inline void set_thread_count(int n) { detail::thread_setting().store(std::max(1, n)); }

/// Runs fn(band) for band in [0, n_bands). The band decomposition is fixed by the
/// caller, so callers that keep one partial buffer per band and merge them in band
/// order get bit-identical results for any thread count.
template <typename Fn>
void for_each_band(int n_bands, Fn&& fn) {
    const int workers = std::min(thread_count(), n_bands);
    if (workers <= 1) {
        for (int b = 0; b < n_bands; ++b) fn(b);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto worker = [&] {
        for (int b = next.fetch_add(1); b < n_bands; b = next.fetch_add(1)) {
            try {
                fn(b);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (int t = 1; t < workers; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

/// Splits [0, n) into n_bands contiguous ranges; returns [begin, end) of one band.
inline std::pair<int, int> band_range(int n, int n_bands, int band) {
    const int begin = static_cast<int>(static_cast<long long>(n) * band / n_bands);
    const int end = static_cast<int>(static_cast<long long>(n) * (band + 1) / n_bands);
    return {begin, end};
}

} // namespace gsi3
