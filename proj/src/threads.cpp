#include "mmaptune/threads.hpp"

#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace mmaptune {

int tune_thread_count() {
    const char* env = std::getenv("MMAP_TUNE_THREADS");
    if (env == nullptr || *env == '\0') return 1;
    int n = 0;
    try {
        n = std::stoi(env);
    } catch (const std::exception&) {
        return 1;
    }
    return n < 1 ? 1 : n;
}

void parallel_for(int n, const std::function<void(int)>& fn) {
    if (n <= 0) return;
    int workers = tune_thread_count();
    if (workers > n) workers = n;
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (int i = w; i < n; i += workers) fn(i);
        });
    }
    for (std::thread& t : pool) t.join();
}

}  // namespace mmaptune
