#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bitquant/bitkernel.hpp"

namespace bitquant {

// Convolution-shaped matmul benchmark: n output channels by m output pixels,
// dot length q = c_i * kernel_size^2 swept over ci_list. The bitwise kernel
// is timed end to end (activation encode+pack plus the packed matmul, with
// weights packed ahead of time); the full-precision baselines run on the
// reconstructed dense operands. Before any timing, the bitwise result is
// gated against the dense product of the same quantized operands.
struct BenchConfig {
  int n = 256;
  int m = 14 * 14 * 100;
  int kernel_size = 3;
  std::vector<int> ci_list = {64, 256, 1024};
  std::vector<std::pair<int, int>> bit_list = {{1, 1}, {2, 2}};  // (k_w, k_a)
  std::vector<int> thread_list = {1};
  int reps = 3;  // timed repetitions per cell, after one discarded warmup
  std::uint64_t seed = 1;

  void validate() const;
};

struct BenchRow {
  std::string kernel;  // fp_naive | fp_blocked | bitwise
  int k_w = 32;        // 32/32 marks the full-precision float rows
  int k_a = 32;
  int c_i = 0;
  int threads = 1;
  double mean_ms = 0.0;
  double std_ms = 0.0;
  double speedup_vs_naive = 1.0;
};

std::vector<BenchRow> run_bench(const BenchConfig& cfg);

std::string bench_csv(const std::vector<BenchRow>& rows);

}  // namespace bitquant
