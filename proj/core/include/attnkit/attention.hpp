#pragma once

#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include "attnkit/matrix.hpp"

namespace attnkit {

/// Additive (Bahdanau) scoring: v_a^T tanh(Wq q + Wk k).
struct AdditiveScore {
  Matrix wq;  // d_a x d_q
  Matrix wk;  // d_a x d_k
  std::vector<double> va;
};

/// Bilinear (Luong) scoring: q^T W k.
struct MultiplicativeScore {
  Matrix w;  // d_q x d_k
};

struct DotScore {};
struct ScaledDotScore {};

using ScoreVariant = std::variant<AdditiveScore, MultiplicativeScore, DotScore, ScaledDotScore>;

double score(const ScoreVariant& variant, std::span<const double> q, std::span<const double> k);

/// Attention mask over an m x n score matrix. Disallowed entries get an
/// additive -1e10 before softmax (not -inf, so max-subtraction stays NaN-free).
class Mask {
 public:
  static Mask none() { return Mask(Kind::kNone); }
  /// Position i may attend to j <= i.
  static Mask causal() { return Mask(Kind::kCausal); }
  /// Explicit allowed pattern; every row must allow at least one position.
  static Mask explicit_mask(int rows, int cols, std::vector<std::uint8_t> allowed);

  bool is_none() const { return kind_ == Kind::kNone; }
  bool is_causal() const { return kind_ == Kind::kCausal; }
  bool is_explicit() const { return kind_ == Kind::kExplicit; }

  /// May query i attend to key j?
  bool allowed(int i, int j) const {
    switch (kind_) {
      case Kind::kNone: return true;
      case Kind::kCausal: return j <= i;
      case Kind::kExplicit: return grid_[static_cast<std::size_t>(i) * cols_ + j] != 0;
    }
    return true;
  }

  /// Validates this mask against an m x n score matrix; rejects shape
  /// mismatches and fully-masked rows.
  void check_compatible(int score_rows, int score_cols) const;

 private:
  enum class Kind { kNone, kCausal, kExplicit };
  explicit Mask(Kind kind) : kind_(kind) {}

  Kind kind_;
  int rows_ = 0;
  int cols_ = 0;
  std::vector<std::uint8_t> grid_;
};

inline constexpr double kMaskScore = -1e10;

struct AttentionResult {
  Matrix output;   // m x d_v
  Matrix weights;  // m x n, rows sum to 1
};

/// Single-query attention: softmax of scores over key rows, then the weighted
/// sum of value rows. n >= 1 required.
std::vector<double> attention_single(std::span<const double> q, const Matrix& keys,
                                     const Matrix& values, const ScoreVariant& variant);

/// Vectorized attention over all query rows: softmax(Q K^T [/ sqrt(d_k)]) V.
/// Retains the weight matrix for inspection and backprop.
AttentionResult attention_batch(const Matrix& q, const Matrix& k, const Matrix& v,
                                const Mask& mask, bool scaled);

/// Self-attention with learned projections Q = X Wq, K = X Wk, V = X Wv,
/// always scaled.
AttentionResult self_attention(const Matrix& x, const Matrix& wq, const Matrix& wk,
                               const Matrix& wv, const Mask& mask);

/// Per-row natural-log entropy of an attention weight matrix; rows must be
/// probability distributions. 0*log(0) counts as 0.
std::vector<double> attention_entropy(const Matrix& weights);

/// Builds the masked, optionally scaled score matrix Q K^T. Shared by the
/// forward pass and the backward derivations.
Matrix masked_scores(const Matrix& q, const Matrix& k, const Mask& mask, bool scaled);

}  // namespace attnkit
