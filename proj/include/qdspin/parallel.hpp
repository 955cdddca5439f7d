#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace qdspin {

/// Worker count: explicit request, else QDSPIN_WORKERS, else hardware threads.
inline unsigned resolve_workers(unsigned requested = 0) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("QDSPIN_WORKERS")) {
        try {
            const long v = std::stol(env);
            if (v > 0) return static_cast<unsigned>(v);
        } catch (...) {
        }
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(chunk) for chunk in [0, n_chunks) over a pool of workers and
/// returns the results in chunk order, so the output never depends on how
/// many workers took part.
template <class Fn>
auto map_chunks(std::uint64_t n_chunks, unsigned workers, Fn&& fn) {
    using Result = decltype(fn(std::uint64_t{}));
    std::vector<Result> results(n_chunks);
    std::atomic<std::uint64_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto body = [&] {
        for (;;) {
            const std::uint64_t i = next.fetch_add(1);
            if (i >= n_chunks) return;
            try {
                results[i] = fn(i);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                next.store(n_chunks);
                return;
            }
        }
    };
    const unsigned n = static_cast<unsigned>(std::min<std::uint64_t>(std::max(1u, workers), n_chunks));
    if (n <= 1) {
        body();
    } else {
        std::vector<std::jthread> pool;
        pool.reserve(n);
        for (unsigned w = 0; w < n; ++w) pool.emplace_back(body);
    }
    if (failure) std::rethrow_exception(failure);
    return results;
}

} // namespace qdspin
