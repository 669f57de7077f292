#include "attnkit/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "attnkit/attention.hpp"
#include "attnkit/rng.hpp"

namespace attnkit {

double scores_flops(int m, int n, int d_k) { return 2.0 * m * n * d_k; }

double attention_flops(int m, int n, int d_k, int d_v) {
  return scores_flops(m, n, d_k) + 2.0 * static_cast<double>(m) * n * d_v;
}

double mha_flops(int n, int d_model, int h) {
  if (h < 1 || d_model % h != 0) {
    throw std::invalid_argument("mha_flops: d_model must be divisible by h");
  }
  const double nd = static_cast<double>(n) * d_model;
  // Q/K/V projections and output projection: 4 matmuls of n x d_model by
  // d_model x d_model; per-head attention sums to 4 n^2 d_model across heads.
  const double projections = 4.0 * 2.0 * nd * d_model;
  const double attention = 4.0 * static_cast<double>(n) * n * d_model;
  return projections + attention;
}

std::vector<ScalingRow> benchmark_scaling(std::span<const int> ns, int d, int repeats) {
  if (repeats < 3) throw std::invalid_argument("benchmark_scaling: repeats must be >= 3");
  if (!std::is_sorted(ns.begin(), ns.end())) {
    throw std::invalid_argument("benchmark_scaling: ns must be ascending");
  }
  using Clock = std::chrono::steady_clock;
  std::vector<ScalingRow> rows;
  rows.reserve(ns.size());
  double sink = 0.0;
  for (const int n : ns) {
    if (n < 1) throw std::invalid_argument("benchmark_scaling: n must be positive");
    Rng rng(0xbe9c0000u + static_cast<std::uint64_t>(n));
    const Matrix q = gaussian_fill(rng, n, d, 0.0, 1.0);
    const Matrix k = gaussian_fill(rng, n, d, 0.0, 1.0);
    const Matrix v = gaussian_fill(rng, n, d, 0.0, 1.0);

    sink += attention_batch(q, k, v, Mask::none(), true).output(0, 0);  // warm-up
    std::vector<double> times;
    times.reserve(repeats);
    for (int r = 0; r < repeats; ++r) {
      const auto start = Clock::now();
      const AttentionResult res = attention_batch(q, k, v, Mask::none(), true);
      const auto stop = Clock::now();
      sink += res.output(n - 1, d - 1);
      times.push_back(std::chrono::duration<double>(stop - start).count());
    }
    std::sort(times.begin(), times.end());
    const double median = times.size() % 2 == 1
                              ? times[times.size() / 2]
                              : 0.5 * (times[times.size() / 2 - 1] + times[times.size() / 2]);
    rows.push_back({n, median, attention_flops(n, n, d, d)});
  }
  if (!std::isfinite(sink)) throw std::runtime_error("benchmark_scaling: non-finite output");
  return rows;
}

double fitted_loglog_slope(std::span<const ScalingRow> rows) {
  if (rows.size() < 2) throw std::invalid_argument("fitted_loglog_slope: need >= 2 points");
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  const double n = static_cast<double>(rows.size());
  for (const ScalingRow& r : rows) {
    const double x = std::log(static_cast<double>(r.n));
    const double y = std::log(r.median_seconds);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

MemoryEstimate memory_estimate(int n, int d_model, int h) {
  if (n < 1 || d_model < 1 || h < 1) {
    throw std::invalid_argument("memory_estimate: dims must be positive");
  }
  constexpr std::uint64_t kBytes = 8;
  MemoryEstimate e;
  const std::uint64_t n2 = static_cast<std::uint64_t>(n) * static_cast<std::uint64_t>(n);
  e.score_bytes = static_cast<std::uint64_t>(h) * n2 * kBytes;
  e.weight_bytes = static_cast<std::uint64_t>(h) * n2 * kBytes;
  e.projection_bytes = 3ull * n * d_model * kBytes;
  e.output_bytes = static_cast<std::uint64_t>(n) * d_model * kBytes;
  return e;
}

void export_attention(const Matrix& weights, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("export_attention: cannot open " + file.string());
  char buf[40];
  for (int i = 0; i < weights.rows(); ++i) {
    for (int j = 0; j < weights.cols(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", weights(i, j));
      out << (j ? "," : "") << buf;
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("export_attention: write failed for " + file.string());
}

void export_attention(const MhaResult& result, const std::filesystem::path& dir,
                      const std::string& stem) {
  std::filesystem::create_directories(dir);
  for (std::size_t head = 0; head < result.head_weights.size(); ++head) {
    export_attention(result.head_weights[head],
                     dir / (stem + "_head" + std::to_string(head) + ".csv"));
  }
}

Matrix read_matrix_csv(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("read_matrix_csv: cannot open " + file.string());
  std::vector<double> data;
  int rows = 0;
  int cols = -1;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    int c = 0;
    while (std::getline(ss, cell, ',')) {
      data.push_back(std::stod(cell));
      ++c;
    }
    if (cols == -1) cols = c;
    if (c != cols) throw std::runtime_error("read_matrix_csv: ragged row in " + file.string());
    ++rows;
  }
  return Matrix(rows, cols, std::move(data));
}

std::vector<std::vector<double>> entropy_profile(const Model& model,
                                                 std::span<const int> tokens) {
  const EncoderActivations acts = encode_with_attention(model, tokens);
  std::vector<std::vector<double>> profile;
  profile.reserve(acts.layers.size());
  for (const MhaResult& layer : acts.layers) {
    std::vector<double> per_head;
    per_head.reserve(layer.head_weights.size());
    for (const Matrix& weights : layer.head_weights) {
      const std::vector<double> h = attention_entropy(weights);
      double mean = 0.0;
      for (double x : h) mean += x;
      per_head.push_back(mean / static_cast<double>(h.size()));
    }
    profile.push_back(std::move(per_head));
  }
  return profile;
}

}  // namespace attnkit
