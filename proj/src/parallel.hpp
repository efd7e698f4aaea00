#pragma once

#include <cstddef>
#include <exception>
#include <mutex>

namespace cmegrpo::detail {

// Runs body(i) for i in [0, n) across OpenMP threads. Each index writes only
// to its own slot, so results do not depend on the thread count. The first
// exception thrown by any index (lowest index wins) is rethrown on the caller.
template <typename Body>
void parallel_for(std::size_t n, Body&& body) {
  std::exception_ptr error;
  std::size_t error_index = n;
  std::mutex guard;
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    try {
      body(static_cast<std::size_t>(i));
    } catch (...) {
      std::lock_guard lock(guard);
      if (static_cast<std::size_t>(i) < error_index) {
        error_index = static_cast<std::size_t>(i);
        error = std::current_exception();
      }
    }
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace cmegrpo::detail
