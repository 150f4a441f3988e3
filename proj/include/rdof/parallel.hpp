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

namespace rdof {

// Default worker budget: $RDOF_WORKERS when set to a positive integer,
// otherwise the hardware concurrency.
inline unsigned default_workers() {
    if (const char* env = std::getenv("RDOF_WORKERS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v > 0) return static_cast<unsigned>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

// Calls fn(i) for every i in [0, n) using up to `workers` threads.
// Work is claimed dynamically; callers must write results by index so the
// outcome never depends on the schedule. The first exception thrown by any
// task is rethrown after all threads join.
template <typename Fn>
void parallel_for(std::size_t n, unsigned workers, Fn&& fn) {
    workers = std::max(1u, workers);
    if (workers == 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr error;
    std::mutex error_mutex;

    auto body = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1, std::memory_order_relaxed);
            if (i >= n || failed.load(std::memory_order_relaxed)) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
                failed = true;
            }
        }
    };

    const auto count = static_cast<unsigned>(std::min<std::size_t>(workers, n));
    std::vector<std::jthread> pool;
    pool.reserve(count - 1);
    for (unsigned t = 1; t < count; ++t) pool.emplace_back(body);
    body();
    pool.clear();
    if (error) std::rethrow_exception(error);
}

// Same contract, but each worker thread owns one State created by make_state();
// fn(state, i) may mutate it freely (scratch buffers, memo caches).
template <typename MakeState, typename Fn>
void parallel_for_with_state(std::size_t n, unsigned workers, MakeState&& make_state, Fn&& fn) {
    workers = std::max(1u, workers);
    const auto count = static_cast<unsigned>(std::max<std::size_t>(1, std::min<std::size_t>(workers, n)));
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr error;
    std::mutex error_mutex;

    auto body = [&] {
        try {
            auto state = make_state();
            for (;;) {
                const std::size_t i = next.fetch_add(1, std::memory_order_relaxed);
                if (i >= n || failed.load(std::memory_order_relaxed)) return;
                fn(state, i);
            }
        } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!error) error = std::current_exception();
            failed = true;
        }
    };

    if (count == 1) {
        body();
    } else {
        std::vector<std::jthread> pool;
        pool.reserve(count - 1);
        for (unsigned t = 1; t < count; ++t) pool.emplace_back(body);
        body();
        pool.clear();
    }
    if (error) std::rethrow_exception(error);
}

} // namespace rdof
