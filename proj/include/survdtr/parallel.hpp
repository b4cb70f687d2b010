#pragma once

// Deterministic parallel map: tasks claim indices from a shared counter and
// must write results to disjoint slots, so the output never depends on the
// number of worker threads.

#include <atomic>
#include <exception>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace survdtr {

// Runs fn(k) for every k in [0, n_tasks) on up to n_threads workers.  If any
// task throws, the remaining tasks are abandoned and the lowest-index failure
// is rethrown as a runtime_error naming the task.
inline void parallel_for(std::size_t n_tasks, int n_threads, const std::function<void(std::size_t)>& fn) {
    if (n_threads < 1) throw std::invalid_argument("parallel_for: need at least one thread");
    auto wrap_and_throw = [](std::size_t k, const std::exception_ptr& eptr) {
        try {
            std::rethrow_exception(eptr);
        } catch (const std::exception& e) {
            throw std::runtime_error("task " + std::to_string(k) + " failed: " + e.what());
        }
    };

    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(n_threads), n_tasks);
    if (workers <= 1) {
        for (std::size_t k = 0; k < n_tasks; ++k) {
            try {
                fn(k);
            } catch (...) {
                wrap_and_throw(k, std::current_exception());
            }
        }
        return;
    }

    std::atomic<std::size_t> next{0};
    std::atomic<bool> stop{false};
    std::mutex failure_mutex;
    std::size_t failed_index = n_tasks;
    std::exception_ptr failure;

    auto worker = [&]() {
        while (!stop.load(std::memory_order_relaxed)) {
            const std::size_t k = next.fetch_add(1, std::memory_order_relaxed);
            if (k >= n_tasks) break;
            try {
                fn(k);
            } catch (...) {
                std::lock_guard<std::mutex> lock(failure_mutex);
                if (k < failed_index) {
                    failed_index = k;
                    failure = std::current_exception();
                }
                stop.store(true, std::memory_order_relaxed);
            }
        }
    };

    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (failure) wrap_and_throw(failed_index, failure);
}

} // namespace survdtr
