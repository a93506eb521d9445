#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace ocrsn {

// Runs fn(chunk_index, begin, end) over fixed-size chunks of [0, n).
// Chunk boundaries depend only on chunk_size, never on the worker count, so
// per-chunk partial results can be folded in chunk order to produce output
// that is identical for any number of workers.
inline void parallel_chunks(std::size_t n, std::size_t chunk_size, int workers,
                            const std::function<void(std::size_t, std::size_t, std::size_t)>& fn) {
    if (n == 0) return;
    if (chunk_size == 0) chunk_size = 1;
    const std::size_t n_chunks = (n + chunk_size - 1) / chunk_size;

    auto run_chunk = [&](std::size_t c) {
        std::size_t b = c * chunk_size;
        std::size_t e = std::min(n, b + chunk_size);
        fn(c, b, e);
    };

    if (workers <= 1 || n_chunks <= 1) {
        for (std::size_t c = 0; c < n_chunks; ++c) run_chunk(c);
        return;
    }

    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr first_error;
    std::mutex error_mutex;

    auto worker = [&]() {
        for (;;) {
            if (failed.load(std::memory_order_relaxed)) return;
            std::size_t c = next.fetch_add(1);
            if (c >= n_chunks) return;
            try {
                run_chunk(c);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
                failed.store(true, std::memory_order_relaxed);
                return;
            }
        }
    };

    std::size_t nw = std::min<std::size_t>(std::size_t(workers), n_chunks);
    std::vector<std::thread> pool;
    pool.reserve(nw);
    for (std::size_t i = 0; i < nw; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace ocrsn
