#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "attnkit/multihead.hpp"
#include "attnkit/transformer.hpp"

namespace attnkit {

struct ScalingRow {
  int n;
  double median_seconds;
  double flops;  // analytic multiply-add count x 2
};

/// Times the scaled-dot attention forward on random n x d inputs,
/// single-threaded, median of `repeats` runs after one discarded warm-up.
/// ns must be ascending; repeats >= 3.
std::vector<ScalingRow> benchmark_scaling(std::span<const int> ns, int d, int repeats);

/// Least-squares slope of log(time) against log(n).
double fitted_loglog_slope(std::span<const ScalingRow> rows);

/// Analytic FLOP counts (2 FLOPs per multiply-add of the matrix products;
/// the softmax's O(mn) element work is excluded as lower order).
double scores_flops(int m, int n, int d_k);                  // Q K^T
double attention_flops(int m, int n, int d_k, int d_v);      // Q K^T plus A V
double mha_flops(int n, int d_model, int h);                 // h-invariant at fixed d_model

/// Analytic activation memory at 8 bytes per 64-bit element.
struct MemoryEstimate {
  std::uint64_t score_bytes;       // per-head score matrices, h * n^2 * 8
  std::uint64_t weight_bytes;      // per-head attention weights, h * n^2 * 8
  std::uint64_t projection_bytes;  // Q', K', V' projections, 3 * n * d_model * 8
  std::uint64_t output_bytes;      // concatenated head outputs, n * d_model * 8

  std::uint64_t total() const {
    return score_bytes + weight_bytes + projection_bytes + output_bytes;
  }
};
MemoryEstimate memory_estimate(int n, int d_model, int h);

/// n x n weight matrix as CSV, one query row per line, 17 significant digits.
void export_attention(const Matrix& weights, const std::filesystem::path& file);

/// One CSV per head: <dir>/<stem>_head<k>.csv.
void export_attention(const MhaResult& result, const std::filesystem::path& dir,
                      const std::string& stem);

Matrix read_matrix_csv(const std::filesystem::path& file);

/// Mean attention entropy per encoder layer and head for the given input.
std::vector<std::vector<double>> entropy_profile(const Model& model,
                                                 std::span<const int> tokens);

}  // namespace attnkit
