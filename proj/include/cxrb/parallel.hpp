#pragma once

// Fixed-size worker pool used by the tensor kernels.
//
// Kernels split their work into a number of chunks that depends only on the
// problem shape, never on the worker count. Each chunk writes a disjoint slice
// of the output, so results are bit-identical for any number of workers.

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <utility>
#include <vector>

namespace cxrb {

namespace detail {

inline thread_local bool in_parallel_region = false;

class WorkerPool {
public:
    WorkerPool() = default;
    WorkerPool(const WorkerPool&) = delete;
    WorkerPool& operator=(const WorkerPool&) = delete;
    ~WorkerPool() { stop_threads(); }

    std::size_t workers() const { return helpers_.size() + 1; }

    void set_workers(std::size_t k)
    {
        k = std::max<std::size_t>(k, 1);
        if (k == workers()) return;
        stop_threads();
        stop_ = false;
        for (std::size_t i = 0; i + 1 < k; ++i)
            helpers_.emplace_back([this, g = generation_] { helper_loop(g); });
    }

    void run(std::size_t chunks, const std::function<void(std::size_t)>& fn)
    {
        if (chunks == 0) return;
        if (helpers_.empty() || chunks == 1 || in_parallel_region) {
            for (std::size_t i = 0; i < chunks; ++i) fn(i);
            return;
        }
        std::unique_lock lock(mutex_);
        job_ = &fn;
        chunks_ = chunks;
        next_.store(0);
        pending_ = helpers_.size();
        error_ = nullptr;
        ++generation_;
        lock.unlock();
        wake_.notify_all();

        drain();

        lock.lock();
        done_.wait(lock, [this] { return pending_ == 0; });
        job_ = nullptr;
        if (error_) std::rethrow_exception(std::exchange(error_, nullptr));
    }

private:
    void drain()
    {
        in_parallel_region = true;
        for (;;) {
            const std::size_t i = next_.fetch_add(1);
            if (i >= chunks_) break;
            try {
                (*job_)(i);
            } catch (...) {
                std::lock_guard guard(mutex_);
                if (!error_) error_ = std::current_exception();
            }
        }
        in_parallel_region = false;
    }

    void helper_loop(std::size_t seen)
    {
        for (;;) {
            {
                std::unique_lock lock(mutex_);
                wake_.wait(lock, [&] { return stop_ || generation_ != seen; });
                if (stop_) return;
                seen = generation_;
            }
            drain();
            {
                std::lock_guard lock(mutex_);
                --pending_;
            }
            done_.notify_one();
        }
    }

    void stop_threads()
    {
        {
            std::lock_guard lock(mutex_);
            stop_ = true;
        }
        wake_.notify_all();
        for (auto& t : helpers_) t.join();
        helpers_.clear();
    }

    std::vector<std::thread> helpers_;
    std::mutex mutex_;
    std::condition_variable wake_;
    std::condition_variable done_;
    const std::function<void(std::size_t)>* job_ = nullptr;
    std::size_t chunks_ = 0;
    std::atomic<std::size_t> next_{0};
    std::size_t pending_ = 0;
    std::size_t generation_ = 0;
    bool stop_ = false;
    std::exception_ptr error_;
};

inline WorkerPool& pool()
{
    static WorkerPool instance;
    return instance;
}

} // namespace detail

/// Number of workers the kernels fan out to (1 = run on the calling thread).
inline std::size_t workers() { return detail::pool().workers(); }

/// Not thread-safe: call only while no kernel is running.
inline void set_workers(std::size_t k) { detail::pool().set_workers(k); }

/// Runs `fn(i)` for every i in [0, chunks) on the worker pool.
inline void parallel_for(std::size_t chunks, const std::function<void(std::size_t)>& fn)
{
    detail::pool().run(chunks, fn);
}

/// Pins the worker count for the lifetime of the guard.
class ScopedWorkers {
public:
    explicit ScopedWorkers(std::size_t k) : previous_(workers()) { set_workers(k); }
    ~ScopedWorkers() { set_workers(previous_); }
    ScopedWorkers(const ScopedWorkers&) = delete;
    ScopedWorkers& operator=(const ScopedWorkers&) = delete;

private:
    std::size_t previous_;
};

} // namespace cxrb
