#include "attnkit/attention.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace attnkit {

double score(const ScoreVariant& variant, std::span<const double> q, std::span<const double> k) {
  return std::visit(
      [&](const auto& v) -> double {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, AdditiveScore>) {
          if (v.wq.cols() != static_cast<int>(q.size()) ||
              v.wk.cols() != static_cast<int>(k.size()) || v.wq.rows() != v.wk.rows() ||
              v.wq.rows() != static_cast<int>(v.va.size())) {
            throw std::invalid_argument("additive score: projection dims inconsistent with q/k");
          }
          const int da = v.wq.rows();
          double acc = 0.0;
          for (int a = 0; a < da; ++a) {
            double h = 0.0;
            const double* wq_row = v.wq.row(a);
            for (std::size_t j = 0; j < q.size(); ++j) h += wq_row[j] * q[j];
            const double* wk_row = v.wk.row(a);
            for (std::size_t j = 0; j < k.size(); ++j) h += wk_row[j] * k[j];
            acc += v.va[a] * std::tanh(h);
          }
          return acc;
        } else if constexpr (std::is_same_v<T, MultiplicativeScore>) {
          if (v.w.rows() != static_cast<int>(q.size()) ||
              v.w.cols() != static_cast<int>(k.size())) {
            throw std::invalid_argument("multiplicative score: W is " + shape_string(v.w) +
                                        ", expected " + std::to_string(q.size()) + "x" +
                                        std::to_string(k.size()));
          }
          double acc = 0.0;
          for (std::size_t i = 0; i < q.size(); ++i) {
            const double* wrow = v.w.row(static_cast<int>(i));
            double inner = 0.0;
            for (std::size_t j = 0; j < k.size(); ++j) inner += wrow[j] * k[j];
            acc += q[i] * inner;
          }
          return acc;
        } else if constexpr (std::is_same_v<T, DotScore>) {
          return dot(q, k);
        } else {
          static_assert(std::is_same_v<T, ScaledDotScore>);
          return dot(q, k) / std::sqrt(static_cast<double>(k.size()));
        }
      },
      variant);
}

Mask Mask::explicit_mask(int rows, int cols, std::vector<std::uint8_t> allowed) {
  Mask m(Kind::kExplicit);
  if (rows <= 0 || cols <= 0 ||
      allowed.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols)) {
    throw std::invalid_argument("explicit mask: grid length does not match dims");
  }
  m.rows_ = rows;
  m.cols_ = cols;
  m.grid_ = std::move(allowed);
  for (int i = 0; i < rows; ++i) {
    bool any = false;
    for (int j = 0; j < cols; ++j) any = any || m.grid_[static_cast<std::size_t>(i) * cols + j];
    if (!any) {
      throw std::invalid_argument("explicit mask: row " + std::to_string(i) +
                                  " masks every position");
    }
  }
  return m;
}

void Mask::check_compatible(int score_rows, int score_cols) const {
  if (kind_ == Kind::kExplicit && (rows_ != score_rows || cols_ != score_cols)) {
    throw std::invalid_argument("mask dims " + std::to_string(rows_) + "x" +
                                std::to_string(cols_) + " incompatible with scores " +
                                std::to_string(score_rows) + "x" + std::to_string(score_cols));
  }
  // A causal row i always allows j = i when i < cols; degenerate wide masks
  // (query rows beyond the key count) would mask a whole row.
  if (kind_ == Kind::kCausal && score_rows > 0 && score_cols == 0) {
    throw std::invalid_argument("causal mask over zero keys");
  }
}

std::vector<double> attention_single(std::span<const double> q, const Matrix& keys,
                                     const Matrix& values, const ScoreVariant& variant) {
  if (keys.rows() != values.rows()) {
    throw std::invalid_argument("attention_single: keys " + shape_string(keys) + " vs values " +
                                shape_string(values));
  }
  const int n = keys.rows();
  if (n < 1) throw std::invalid_argument("attention_single requires at least one key");

  std::vector<double> scores(n);
  for (int i = 0; i < n; ++i) scores[i] = score(variant, q, keys.row_span(i));

  double mx = scores[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, scores[i]);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    scores[i] = std::exp(scores[i] - mx);
    sum += scores[i];
  }

  std::vector<double> out(values.cols(), 0.0);
  for (int i = 0; i < n; ++i) {
    const double alpha = scores[i] / sum;
    const double* vrow = values.row(i);
    for (int c = 0; c < values.cols(); ++c) out[c] += alpha * vrow[c];
  }
  return out;
}

Matrix masked_scores(const Matrix& q, const Matrix& k, const Mask& mask, bool scaled) {
  if (q.cols() != k.cols()) {
    throw std::invalid_argument("attention: query dim " + shape_string(q) +
                                " vs key dim " + shape_string(k));
  }
  Matrix s = matmul_abt(q, k);
  if (scaled) {
    const double inv = 1.0 / std::sqrt(static_cast<double>(k.cols()));
    for (std::size_t i = 0; i < s.size(); ++i) s.data()[i] *= inv;
  }
  mask.check_compatible(s.rows(), s.cols());
  if (!mask.is_none()) {
    for (int i = 0; i < s.rows(); ++i) {
      bool any = false;
      for (int j = 0; j < s.cols(); ++j) {
        if (mask.allowed(i, j)) {
          any = true;
        } else {
          s(i, j) += kMaskScore;
        }
      }
      if (!any) {
        throw std::invalid_argument("attention: query row " + std::to_string(i) +
                                    " has every key masked");
      }
    }
  }
  return s;
}

AttentionResult attention_batch(const Matrix& q, const Matrix& k, const Matrix& v,
                                const Mask& mask, bool scaled) {
  if (k.rows() != v.rows()) {
    throw std::invalid_argument("attention: keys " + shape_string(k) + " vs values " +
                                shape_string(v));
  }
  const Matrix scores = masked_scores(q, k, mask, scaled);
  AttentionResult res;
  res.weights = stable_softmax_rows(scores);
  res.output = matmul(res.weights, v);
  return res;
}

AttentionResult self_attention(const Matrix& x, const Matrix& wq, const Matrix& wk,
                               const Matrix& wv, const Mask& mask) {
  if (x.cols() != wq.rows() || x.cols() != wk.rows() || x.cols() != wv.rows()) {
    throw std::invalid_argument("self_attention: input width " + shape_string(x) +
                                " incompatible with projections");
  }
  return attention_batch(matmul(x, wq), matmul(x, wk), matmul(x, wv), mask, /*scaled=*/true);
}

std::vector<double> attention_entropy(const Matrix& weights) {
  constexpr double kDistributionTol = 1e-9;
  std::vector<double> h(weights.rows());
  for (int i = 0; i < weights.rows(); ++i) {
    const double* row = weights.row(i);
    double sum = 0.0;
    double acc = 0.0;
    for (int j = 0; j < weights.cols(); ++j) {
      const double a = row[j];
      if (a < 0.0) {
        throw std::invalid_argument("attention_entropy: negative weight in row " +
                                    std::to_string(i));
      }
      sum += a;
      if (a > 0.0) acc -= a * std::log(a);
    }
    if (std::abs(sum - 1.0) > kDistributionTol) {
      throw std::invalid_argument("attention_entropy: row " + std::to_string(i) +
                                  " sums to " + std::to_string(sum) + ", not a distribution");
    }
    h[i] = acc;
  }
  return h;
}

}  // namespace attnkit
