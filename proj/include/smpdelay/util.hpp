#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace smpdelay {

// Stateless 64-bit mixer; the basis for all randomness and content hashes.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ (0x9E3779B97F4A7C15ULL + splitmix64(b)));
}

std::uint64_t fnv1a64(const void* data, std::size_t n);
std::uint64_t fnv1a64(const std::string& s);

// Runs fn(block_index) for block_index in [0, n_blocks) on up to `workers`
// threads. Blocks must be independent; any shared accumulation has to happen
// after the loop, in block order, or results would depend on the worker count.
void parallel_for_blocks(std::size_t n_blocks,
                         const std::function<void(std::size_t)>& fn,
                         int workers);

// Fixed reduction block: per-path quantities are summed serially inside each
// 1024-path block and the block sums are combined in index order, so totals
// are bit-identical no matter how many workers produced the per-path values.
inline constexpr std::size_t kReductionBlock = 1024;

double blocked_sum(const double* v, std::size_t n);
inline double blocked_sum(const std::vector<double>& v) {
  return blocked_sum(v.data(), v.size());
}

struct MeanVar {
  double mean = 0.0;
  double var = 0.0;  // unbiased sample variance
  double sem = 0.0;  // standard error of the mean
  std::size_t n = 0;
};

MeanVar mean_sem(const double* v, std::size_t n);
inline MeanVar mean_sem(const std::vector<double>& v) {
  return mean_sem(v.data(), v.size());
}

int default_workers();

std::string format_double(double x);  // shortest round-trip decimal form

} // namespace smpdelay
