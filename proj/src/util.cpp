#include "smpdelay/util.hpp"

#include <atomic>
#include <charconv>
#include <cmath>
#include <mutex>
#include <thread>

namespace smpdelay {

std::uint64_t fnv1a64(const void* data, std::size_t n) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

void parallel_for_blocks(std::size_t n_blocks,
                         const std::function<void(std::size_t)>& fn,
                         int workers) {
  if (n_blocks == 0) return;
  if (workers <= 1 || n_blocks == 1) {
    for (std::size_t b = 0; b < n_blocks; ++b) fn(b);
    return;
  }
  std::size_t nw = std::min<std::size_t>(workers, n_blocks);
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex err_mutex;
  std::vector<std::thread> pool;
  pool.reserve(nw);
  for (std::size_t w = 0; w < nw; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        std::size_t b = next.fetch_add(1);
        if (b >= n_blocks) break;
        try {
          fn(b);
        } catch (...) {
          std::lock_guard<std::mutex> lk(err_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

double blocked_sum(const double* v, std::size_t n) {
  double total = 0.0;
  for (std::size_t b0 = 0; b0 < n; b0 += kReductionBlock) {
    std::size_t b1 = std::min(n, b0 + kReductionBlock);
    double s = 0.0;
    for (std::size_t i = b0; i < b1; ++i) s += v[i];
    total += s;
  }
  return total;
}

MeanVar mean_sem(const double* v, std::size_t n) {
  MeanVar r;
  r.n = n;
  if (n == 0) return r;
  r.mean = blocked_sum(v, n) / static_cast<double>(n);
  if (n == 1) return r;
  double ss = 0.0;
  for (std::size_t b0 = 0; b0 < n; b0 += kReductionBlock) {
    std::size_t b1 = std::min(n, b0 + kReductionBlock);
    double s = 0.0;
    for (std::size_t i = b0; i < b1; ++i) {
      double dlt = v[i] - r.mean;
      s += dlt * dlt;
    }
    ss += s;
  }
  r.var = ss / static_cast<double>(n - 1);
  r.sem = std::sqrt(r.var / static_cast<double>(n));
  return r;
}

int default_workers() {
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

std::string format_double(double x) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

} // namespace smpdelay
