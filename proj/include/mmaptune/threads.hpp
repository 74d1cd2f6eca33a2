#pragma once

#include <functional>

namespace mmaptune {

/// Worker cap from MMAP_TUNE_THREADS; unset, empty, 0 or 1 mean serial.
int tune_thread_count();

/// Runs fn(0..n-1), chunked across up to tune_thread_count() threads. Callers
/// must make iterations independent; output ordering is theirs to fix.
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace mmaptune
