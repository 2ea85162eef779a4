#pragma once

#include <cstddef>
#include <functional>

namespace mrad {

// Worker count: MRAD_THREADS if set and positive, else the CPUs this process may run on.
std::size_t thread_count();

// Runs body(i) for i in [0, n). Each index is visited exactly once, so any
// body that writes only to slot i produces schedule-independent output.
// `work_per_item` is a rough operation count per index; loops whose total
// falls below a few tens of thousands of operations run serially, since
// starting threads would cost more.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body, std::size_t work_per_item = 1);

} // namespace mrad
