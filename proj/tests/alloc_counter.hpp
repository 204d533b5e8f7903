#pragma once

// Heap allocation counter. Linking alloc_counter.cpp interposes malloc and
// friends for the whole process; operator new and Eigen both end up there.
// Only threads that set `counting` are tallied.

#include <atomic>

namespace alloc_counter {
extern thread_local bool counting;
extern std::atomic<long> allocations;
}  // namespace alloc_counter
