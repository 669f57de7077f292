#include "attnkit/multihead.hpp"

#include <stdexcept>
#include <string>

namespace attnkit {

void MhaParams::validate() const {
  if (h < 1) throw std::invalid_argument("mha: head count must be >= 1, got " + std::to_string(h));
  const int dm = wq.rows();
  if (wk.rows() != dm || wv.rows() != dm) {
    throw std::invalid_argument("mha: projection input dims disagree: wq " + shape_string(wq) +
                                ", wk " + shape_string(wk) + ", wv " + shape_string(wv));
  }
  if (wq.cols() % h != 0 || wk.cols() % h != 0 || wv.cols() % h != 0) {
    throw std::invalid_argument("mha: projection width not divisible by h=" + std::to_string(h));
  }
  if (wq.cols() != wk.cols()) {
    throw std::invalid_argument("mha: query/key projection widths differ: " + shape_string(wq) +
                                " vs " + shape_string(wk));
  }
  if (wo.rows() != wv.cols()) {
    throw std::invalid_argument("mha: wo " + shape_string(wo) + " must have h*d_v = " +
                                std::to_string(wv.cols()) + " rows");
  }
}

std::vector<Matrix> split_heads(const Matrix& m, int h) {
  if (h < 1 || m.cols() % h != 0) {
    throw std::invalid_argument("split_heads: cols " + std::to_string(m.cols()) +
                                " not divisible by h=" + std::to_string(h));
  }
  const int w = m.cols() / h;
  std::vector<Matrix> heads;
  heads.reserve(h);
  for (int head = 0; head < h; ++head) {
    Matrix block(m.rows(), w);
    for (int i = 0; i < m.rows(); ++i) {
      const double* src = m.row(i) + static_cast<std::size_t>(head) * w;
      double* dst = block.row(i);
      for (int j = 0; j < w; ++j) dst[j] = src[j];
    }
    heads.push_back(std::move(block));
  }
  return heads;
}

Matrix merge_heads(const std::vector<Matrix>& heads) {
  if (heads.empty()) throw std::invalid_argument("merge_heads: empty head list");
  const int rows = heads.front().rows();
  const int w = heads.front().cols();
  for (const Matrix& head : heads) {
    if (head.rows() != rows || head.cols() != w) {
      throw std::invalid_argument("merge_heads: inconsistent head shapes");
    }
  }
  Matrix out(rows, w * static_cast<int>(heads.size()));
  for (std::size_t head = 0; head < heads.size(); ++head) {
    for (int i = 0; i < rows; ++i) {
      const double* src = heads[head].row(i);
      double* dst = out.row(i) + head * w;
      for (int j = 0; j < w; ++j) dst[j] = src[j];
    }
  }
  return out;
}

MhaResult mha_forward(const Matrix& xq, const Matrix& xk, const Matrix& xv,
                      const MhaParams& params, const Mask& mask) {
  params.validate();
  const int dm = params.d_model();
  if (xq.cols() != dm || xk.cols() != dm || xv.cols() != dm) {
    throw std::invalid_argument("mha: input width must equal d_model=" + std::to_string(dm));
  }
  if (xk.rows() != xv.rows()) {
    throw std::invalid_argument("mha: key rows " + shape_string(xk) + " vs value rows " +
                                shape_string(xv));
  }

  const std::vector<Matrix> qh = split_heads(matmul(xq, params.wq), params.h);
  const std::vector<Matrix> kh = split_heads(matmul(xk, params.wk), params.h);
  const std::vector<Matrix> vh = split_heads(matmul(xv, params.wv), params.h);

  MhaResult res;
  res.head_weights.reserve(params.h);
  std::vector<Matrix> outputs;
  outputs.reserve(params.h);
  for (int head = 0; head < params.h; ++head) {
    AttentionResult a = attention_batch(qh[head], kh[head], vh[head], mask, /*scaled=*/true);
    outputs.push_back(std::move(a.output));
    res.head_weights.push_back(std::move(a.weights));
  }
  res.output = matmul(merge_heads(outputs), params.wo);
  return res;
}

}  // namespace attnkit
