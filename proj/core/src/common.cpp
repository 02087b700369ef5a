#include "spire/common.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace spire {

int worker_count() {
    static const int n = [] {
        if (const char* env = std::getenv("SPIRE_THREADS")) {
            int v = std::atoi(env);
            if (v >= 1) return v;
        }
        unsigned hw = std::thread::hardware_concurrency();
        return hw == 0 ? 1 : static_cast<int>(hw);
    }();
    return n;
}

void parallel_for(std::int64_t n, std::int64_t grain,
                  const std::function<void(std::int64_t, std::int64_t)>& fn) {
    if (n <= 0) return;
    if (grain < 1) grain = 1;
    const int max_workers = worker_count();
    const int workers = static_cast<int>(std::min<std::int64_t>(max_workers, (n + grain - 1) / grain));
    if (workers <= 1) {
        fn(0, n);
        return;
    }
    // Contiguous chunks; chunk boundaries depend only on (n, workers).
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    const std::int64_t chunk = (n + workers - 1) / workers;
    for (int w = 1; w < workers; ++w) {
        const std::int64_t b = std::min<std::int64_t>(n, w * chunk);
        const std::int64_t e = std::min<std::int64_t>(n, (w + 1) * chunk);
        if (b < e) pool.emplace_back(fn, b, e);
    }
    fn(0, std::min<std::int64_t>(n, chunk));
    for (auto& t : pool) t.join();
}

}  // namespace spire
