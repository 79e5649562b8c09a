#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace npml {

/// Worker count: hardware concurrency, capped by NPML_THREADS when set.
inline std::size_t thread_count() {
    std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("NPML_THREADS")) {
        try {
            const long cap = std::stol(env);
            if (cap >= 1) hw = std::min<std::size_t>(hw, static_cast<std::size_t>(cap));
        } catch (const std::exception&) {
            // ignore unparsable values
        }
    }
    return hw;
}

namespace detail {
inline thread_local bool in_parallel_region = false;
}

/// Calls body(begin, end) over fixed-size chunks of [0, count). The chunking
/// does not depend on the worker count, so callers writing per-index or
/// per-chunk results get schedule-independent output. Nested calls run inline.
template <class Body>
void parallel_for_chunks(std::size_t count, std::size_t chunk, Body&& body) {
    if (count == 0) return;
    chunk = std::max<std::size_t>(chunk, 1);
    const std::size_t chunks = (count + chunk - 1) / chunk;
    const std::size_t workers = detail::in_parallel_region ? 1 : std::min(thread_count(), chunks);
    if (workers <= 1) {
        for (std::size_t c = 0; c < chunks; ++c) body(c * chunk, std::min(count, (c + 1) * chunk));
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto worker = [&] {
        detail::in_parallel_region = true;
        for (;;) {
            const std::size_t c = next.fetch_add(1);
            if (c >= chunks) break;
            try {
                body(c * chunk, std::min(count, (c + 1) * chunk));
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
            }
        }
        detail::in_parallel_region = false;
    };
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

template <class Body>
void parallel_for(std::size_t count, Body&& body) {
    parallel_for_chunks(count, 64, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) body(i);
    });
}

} // namespace npml
