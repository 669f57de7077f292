#pragma once

#include <vector>

#include "attnkit/attention.hpp"
#include "attnkit/matrix.hpp"

namespace attnkit {

/// Combined projections for h heads. The d_model x d_model projection output
/// is interpreted as h contiguous column blocks of width d_k (resp. d_v).
struct MhaParams {
  Matrix wq;  // d_model x d_model
  Matrix wk;  // d_model x d_model
  Matrix wv;  // d_model x d_model
  Matrix wo;  // h*d_v x d_model
  int h = 1;

  int d_model() const { return wq.rows(); }
  int d_k() const { return wq.cols() / h; }
  int d_v() const { return wv.cols() / h; }

  void validate() const;
};

struct MhaResult {
  Matrix output;                     // n x d_model
  std::vector<Matrix> head_weights;  // h matrices, each m x n
};

/// Splits by contiguous column blocks; M.cols() must be divisible by h.
std::vector<Matrix> split_heads(const Matrix& m, int h);

/// Exact inverse of split_heads: concatenates column blocks back together.
Matrix merge_heads(const std::vector<Matrix>& heads);

/// Multi-head attention. Self-attention passes the same matrix for xq/xk/xv;
/// cross-attention passes decoder queries with encoder keys/values. The mask
/// applies identically to every head.
MhaResult mha_forward(const Matrix& xq, const Matrix& xk, const Matrix& xv,
                      const MhaParams& params, const Mask& mask);

}  // namespace attnkit
