#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace ganforge {

// Thread cap from GANFORGE_THREADS; default 1 (fully deterministic).
inline int thread_count() {
    static const int cached = [] {
        const char* env = std::getenv("GANFORGE_THREADS");
        if (!env) return 1;
        int n = std::atoi(env);
        if (n < 1) return 1;
        return std::min(n, 256);
    }();
    return cached;
}

// Runs fn(i) for i in [0, count). Each index is handled by exactly one
// worker with a fixed inner order, so results are bit-identical for any
// thread count. Workers must only write state they own.
inline void parallel_for(std::int64_t count, const std::function<void(std::int64_t)>& fn) {
    const int threads = thread_count();
    if (threads <= 1 || count <= 1) {
        for (std::int64_t i = 0; i < count; ++i) fn(i);
        return;
    }
    const int workers = static_cast<int>(std::min<std::int64_t>(threads, count));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    const std::int64_t chunk = (count + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
        const std::int64_t begin = w * chunk;
        const std::int64_t end = std::min<std::int64_t>(begin + chunk, count);
        if (begin >= end) break;
        pool.emplace_back([begin, end, &fn] {
            for (std::int64_t i = begin; i < end; ++i) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace ganforge
