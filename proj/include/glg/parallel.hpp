#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace glg {

inline int hardware_threads() {
  unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : static_cast<int>(n);
}

// Runs fn(block_index, begin, end) over [0, count) split into fixed-size
// blocks.  The block boundaries depend only on count and block_size — never on
// the thread count — so callers that accumulate one partial result per block
// and reduce the partials in block order get bit-identical results for any
// number of threads.
template <class Fn>
void parallel_blocks(std::size_t count, std::size_t block_size, int threads, Fn&& fn) {
  if (count == 0) return;
  if (block_size == 0) block_size = 1;
  const std::size_t blocks = (count + block_size - 1) / block_size;
  if (threads <= 0) threads = hardware_threads();

  auto run_block = [&](std::size_t b) {
    const std::size_t begin = b * block_size;
    const std::size_t end = begin + block_size < count ? begin + block_size : count;
    fn(b, begin, end);
  };

  if (threads == 1 || blocks == 1) {
    for (std::size_t b = 0; b < blocks; ++b) run_block(b);
    return;
  }

  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t b = next.fetch_add(1);
      if (b >= blocks) return;
      try {
        run_block(b);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        return;
      }
    }
  };

  const std::size_t pool = std::min<std::size_t>(static_cast<std::size_t>(threads), blocks);
  std::vector<std::thread> team;
  team.reserve(pool);
  for (std::size_t i = 0; i < pool; ++i) team.emplace_back(worker);
  for (auto& t : team) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace glg
