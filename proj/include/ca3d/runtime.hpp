// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>

namespace ca3d {

/// CA3D_THREADS if set to a positive integer, else the logical core count.
int thread_count();

/// Applies thread_count() to the linear-algebra backend.
void configure_threads();

/// Runs body(i) for i in [0, n) on up to thread_count() threads. Results
/// must not depend on scheduling.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& body);

}  // namespace ca3d
