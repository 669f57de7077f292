#include <doctest.h>

#include <chrono>
#include <cmath>
#include <stdexcept>

#include "attnkit/multihead.hpp"
#include "attnkit/rng.hpp"
#include "test_helpers.hpp"

using namespace attnkit;
using namespace attnkit::testing;

namespace {

MhaParams random_params(Rng& rng, int d_model, int h) {
  MhaParams p;
  p.wq = random_matrix(rng, d_model, d_model);
  p.wk = random_matrix(rng, d_model, d_model);
  p.wv = random_matrix(rng, d_model, d_model);
  p.wo = random_matrix(rng, d_model, d_model);
  p.h = h;
  return p;
}

// Naive per-head reference: slices each head's projection columns directly,
// no combined projection or reshape.
Matrix naive_mha(const Matrix& xq, const Matrix& xk, const Matrix& xv, const MhaParams& p,
                 const Mask& mask) {
  const int dk = p.d_k();
  const int dv = p.d_v();
  Matrix concat(xq.rows(), p.h * dv);
  for (int head = 0; head < p.h; ++head) {
    auto slice = [&](const Matrix& w, int width) {
      Matrix s(w.rows(), width);
      for (int i = 0; i < w.rows(); ++i) {
        for (int j = 0; j < width; ++j) s(i, j) = w(i, head * width + j);
      }
      return s;
    };
    const Matrix q = naive_matmul(xq, slice(p.wq, dk));
    const Matrix k = naive_matmul(xk, slice(p.wk, dk));
    const Matrix v = naive_matmul(xv, slice(p.wv, dv));
    const AttentionResult res = attention_batch(q, k, v, mask, true);
    for (int i = 0; i < res.output.rows(); ++i) {
      for (int j = 0; j < dv; ++j) concat(i, head * dv + j) = res.output(i, j);
    }
  }
  return naive_matmul(concat, p.wo);
}

}  // namespace

TEST_CASE("split/merge heads round trip and layout") {
  const Matrix m{{1, 2, 3, 4}, {5, 6, 7, 8}};
  const auto halves = split_heads(m, 2);
  CHECK(halves.size() == 2);
  CHECK(halves[0](0, 0) == 1);
  CHECK(halves[0](1, 1) == 6);
  CHECK(halves[1](0, 0) == 3);
  CHECK(halves[1](1, 1) == 8);
  CHECK(bits_equal(merge_heads(halves), m));

  CHECK(bits_equal(merge_heads(split_heads(m, 1)), m));

  Rng rng(1);
  const Matrix big = random_matrix(rng, 6, 12);
  CHECK(bits_equal(merge_heads(split_heads(big, 3)), big));

  CHECK_THROWS_AS(split_heads(m, 3), std::invalid_argument);
}

TEST_CASE("single-head mha equals scaled attention plus output projection") {
  Rng rng(2);
  const int n = 5, d = 6;
  const Matrix x = random_matrix(rng, n, d);
  MhaParams p = random_params(rng, d, 1);
  const MhaResult res = mha_forward(x, x, x, p, Mask::none());
  const AttentionResult plain =
      attention_batch(matmul(x, p.wq), matmul(x, p.wk), matmul(x, p.wv), Mask::none(), true);
  CHECK(max_abs_diff(res.output, matmul(plain.output, p.wo)) < 1e-12);
  CHECK(max_abs_diff(res.head_weights[0], plain.weights) < 1e-15);
}

TEST_CASE("zero output projection keeps weights valid") {
  Rng rng(3);
  const Matrix x = random_matrix(rng, 4, 8);
  MhaParams p = random_params(rng, 8, 2);
  p.wo = Matrix(8, 8);
  const MhaResult res = mha_forward(x, x, x, p, Mask::none());
  CHECK(frobenius_norm(res.output) == 0.0);
  for (const Matrix& w : res.head_weights) {
    for (int i = 0; i < w.rows(); ++i) {
      double sum = 0.0;
      for (int j = 0; j < w.cols(); ++j) {
        CHECK(w(i, j) >= 0.0);
        sum += w(i, j);
      }
      CHECK(std::abs(sum - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("BERT-base dimension choice") {
  Rng rng(4);
  MhaParams p;
  p.wq = Matrix(768, 768);
  p.wk = Matrix(768, 768);
  p.wv = Matrix(768, 768);
  p.wo = Matrix(768, 768);
  p.h = 12;
  p.validate();
  CHECK(p.d_k() == 64);
  CHECK(p.d_v() == 64);

  const Matrix x = random_matrix(rng, 3, 768, -0.1, 0.1);
  const MhaResult res = mha_forward(x, x, x, p, Mask::none());
  CHECK(res.output.rows() == 3);
  CHECK(res.output.cols() == 768);
  CHECK(res.head_weights.size() == 12);
}

TEST_CASE("mha_forward matches the naive per-head loop") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const int h = (trial % 3 == 0) ? 1 : (trial % 3 == 1) ? 2 : 4;
    const int d_model = h * (1 + static_cast<int>(rng.below(4)));
    const int n = 1 + static_cast<int>(rng.below(8));
    const Matrix x = random_matrix(rng, n, d_model);
    const MhaParams p = random_params(rng, d_model, h);
    const Mask mask = trial % 4 == 0 ? Mask::causal() : Mask::none();
    CHECK(max_abs_diff(mha_forward(x, x, x, p, mask).output, naive_mha(x, x, x, p, mask)) <
          1e-12);
  }
}

TEST_CASE("cross-attention accepts distinct query and memory lengths") {
  Rng rng(6);
  const int d_model = 8;
  const Matrix queries = random_matrix(rng, 3, d_model);
  const Matrix memory = random_matrix(rng, 5, d_model);
  const MhaParams p = random_params(rng, d_model, 2);
  const MhaResult res = mha_forward(queries, memory, memory, p, Mask::none());
  CHECK(res.output.rows() == 3);
  CHECK(res.head_weights[0].rows() == 3);
  CHECK(res.head_weights[0].cols() == 5);
  CHECK(max_abs_diff(res.output, naive_mha(queries, memory, memory, p, Mask::none())) < 1e-12);
}

TEST_CASE("multi-head self-attention permutation equivariance") {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const int h = trial % 2 == 0 ? 2 : 4;
    const int n = 2 + static_cast<int>(rng.below(7));
    const int d_model = h * (1 + static_cast<int>(rng.below(16 / h)));
    const Matrix x = random_matrix(rng, n, d_model);
    const MhaParams p = random_params(rng, d_model, h);
    const Matrix perm = permutation_matrix(rng, n);
    const Matrix lhs = mha_forward(matmul(perm, x), matmul(perm, x), matmul(perm, x), p,
                                   Mask::none())
                           .output;
    const Matrix rhs = matmul(perm, mha_forward(x, x, x, p, Mask::none()).output);
    CHECK(max_abs_diff(lhs, rhs) < 1e-10);
  }
}

TEST_CASE("head-count sweep keeps wall-clock cost within 2x at fixed d_model") {
  Rng rng(8);
  const int n = 512, d_model = 256;
  const Matrix x = random_matrix(rng, n, d_model, -0.5, 0.5);

  auto median_time = [&](int h) {
    const MhaParams p = random_params(rng, d_model, h);
    (void)mha_forward(x, x, x, p, Mask::none());  // warm-up
    std::vector<double> times;
    for (int r = 0; r < 3; ++r) {
      const auto start = std::chrono::steady_clock::now();
      const MhaResult res = mha_forward(x, x, x, p, Mask::none());
      const auto stop = std::chrono::steady_clock::now();
      CHECK(res.output.all_finite());
      times.push_back(std::chrono::duration<double>(stop - start).count());
    }
    std::sort(times.begin(), times.end());
    return times[1];
  };

  const double t1 = median_time(1);
  const double t8 = median_time(8);
  const double ratio = t8 / t1;
  CHECK(ratio >= 0.5);
  CHECK(ratio <= 2.0);
}
