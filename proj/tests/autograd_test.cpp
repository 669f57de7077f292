#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "attnkit/autograd.hpp"
#include "attnkit/gradcheck.hpp"
#include "attnkit/training.hpp"
#include "attnkit/transformer.hpp"
#include "test_helpers.hpp"

using namespace attnkit;
using namespace attnkit::testing;

namespace {

std::vector<double> random_distribution(Rng& rng, int n) {
  Matrix logits(1, n);
  for (int i = 0; i < n; ++i) logits(0, i) = rng.normal();
  const Matrix p = stable_softmax_rows(logits);
  return std::vector<double>(p.row(0), p.row(0) + n);
}

Model tiny_model(int n_layers, NormPlacement placement, std::uint64_t seed) {
  Model m;
  m.config.vocab_size = 9;
  m.config.d_model = 6;
  m.config.h = 2;
  m.config.d_ff = 10;
  m.config.n_layers = n_layers;
  m.config.max_len = 16;
  m.config.norm_placement = placement;
  m.config.activation = ActivationKind::kGelu;
  Rng rng(seed);
  m.params = init_params(m.config, rng);
  return m;
}

}  // namespace

TEST_CASE("softmax_backward shift and saturation cases") {
  Rng rng(1);
  const auto a = random_distribution(rng, 5);

  // Constant upstream: gradient of a normalized distribution is zero.
  const std::vector<double> constant(5, 3.25);
  for (const double g : softmax_backward(a, constant)) CHECK(std::abs(g) < 1e-15);

  // One-hot softmax output: zero gradient for any upstream.
  std::vector<double> onehot(5, 0.0);
  onehot[2] = 1.0;
  std::vector<double> upstream(5);
  for (double& u : upstream) u = rng.normal();
  for (const double g : softmax_backward(onehot, upstream)) CHECK(std::abs(g) < 1e-15);

  CHECK_THROWS_AS(softmax_backward(a, std::vector<double>(4, 0.0)), std::invalid_argument);
}

TEST_CASE("softmax_backward equals the explicit two-case Jacobian product") {
  Rng rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(6));
    const auto a = random_distribution(rng, n);
    std::vector<double> upstream(n);
    for (double& u : upstream) u = rng.normal();

    // Full Jacobian: J[k][j] = a_j (1 - a_j) if k == j else -a_j a_k.
    std::vector<double> expected(n, 0.0);
    for (int j = 0; j < n; ++j) {
      for (int k = 0; k < n; ++k) {
        const double jac = (k == j) ? a[j] * (1.0 - a[j]) : -a[j] * a[k];
        expected[j] += upstream[k] * jac;
      }
    }
    const auto got = softmax_backward(a, upstream);
    for (int j = 0; j < n; ++j) CHECK(std::abs(got[j] - expected[j]) < 1e-12);
  }
}

TEST_CASE("softmax_backward output is orthogonal to the all-ones vector") {
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(8));
    const auto a = random_distribution(rng, n);
    std::vector<double> upstream(n);
    for (double& u : upstream) u = 2.0 * rng.normal();
    double sum = 0.0;
    for (const double g : softmax_backward(a, upstream)) sum += g;
    CHECK(std::abs(sum) < 1e-12);
  }
}

TEST_CASE("attention_backward edge cases") {
  Rng rng(4);
  const Matrix q = random_matrix(rng, 3, 4);
  const Matrix k = random_matrix(rng, 3, 4);
  const Matrix v = random_matrix(rng, 3, 2);
  AttentionTape tape;
  attention_forward_taped(q, k, v, Mask::none(), true, tape);

  const AttentionGrads zero = attention_backward(tape, Matrix(3, 2));
  CHECK(frobenius_norm(zero.dq) == 0.0);
  CHECK(frobenius_norm(zero.dk) == 0.0);
  CHECK(frobenius_norm(zero.dv) == 0.0);

  // Singleton softmax: weight is constant 1, so only dV flows.
  AttentionTape single;
  const Matrix q1 = random_matrix(rng, 1, 4);
  const Matrix k1 = random_matrix(rng, 1, 4);
  const Matrix v1 = random_matrix(rng, 1, 2);
  attention_forward_taped(q1, k1, v1, Mask::none(), true, single);
  const Matrix upstream = random_matrix(rng, 1, 2);
  const AttentionGrads g = attention_backward(single, upstream);
  CHECK(bits_equal(g.dv, upstream));
  CHECK(frobenius_norm(g.dq) == 0.0);
  CHECK(frobenius_norm(g.dk) == 0.0);

  // Wrong-shape upstream is a tape mismatch.
  CHECK_THROWS_AS(attention_backward(tape, Matrix(3, 5)), std::invalid_argument);
  CHECK_THROWS_AS(attention_backward(AttentionTape{}, Matrix(1, 1)), std::invalid_argument);
}

TEST_CASE("layer_norm_backward hand cases") {
  Rng rng(5);
  const int d = 6;
  const Matrix x = random_matrix(rng, 2, d);
  Matrix gamma(1, d), beta(1, d);
  for (int j = 0; j < d; ++j) gamma(0, j) = 1.0;

  LnTrace trace;
  layer_norm_rows_traced(x, gamma, beta, 1e-6, trace);

  const LayerNormGrads zero = layer_norm_backward(trace, gamma, Matrix(2, d));
  CHECK(frobenius_norm(zero.dx) == 0.0);
  CHECK(frobenius_norm(zero.dgamma) == 0.0);
  CHECK(frobenius_norm(zero.dbeta) == 0.0);

  // For gamma = 1, beta = 0 the gamma gradient is upstream (.) xhat.
  const Matrix upstream = random_matrix(rng, 2, d);
  const LayerNormGrads g = layer_norm_backward(trace, gamma, upstream);
  const Matrix expected = column_sums(hadamard(upstream, trace.xhat));
  CHECK(max_abs_diff(g.dgamma, expected) < 1e-15);
  CHECK(max_abs_diff(g.dbeta, column_sums(upstream)) < 1e-15);
}

TEST_CASE("gradcheck suites stay below tolerance") {
  for (const auto& report : run_gradcheck("all")) {
    INFO(report.suite);
    CHECK(report.instances >= 20);
    CHECK(report.max_rel_err < kGradCheckTol);
  }
}

TEST_CASE("encoder-only gradients match finite differences") {
  Rng rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    Model model = tiny_model(1, trial % 2 ? NormPlacement::kPreNorm : NormPlacement::kPostNorm,
                             100 + trial);
    const std::vector<int> src = {kBosToken, 3, 4, 5, kEosToken};
    const Matrix upstream = random_matrix(rng, 5, model.config.d_model, -0.5, 0.5);

    Rng fwd(0);
    GradTape tape;
    encode_traced(model, src, fwd, false, tape);
    ModelParams grads;
    encode_backward(tape, upstream, grads);

    std::vector<double> point, analytic;
    for (const auto& [key, m] : model.params) {
      point.insert(point.end(), m.data(), m.data() + m.size());
      const Matrix& g = grads.at(key);
      analytic.insert(analytic.end(), g.data(), g.data() + g.size());
    }
    Model probe = model;
    auto f = [&](std::span<const double> p) {
      std::size_t off = 0;
      for (auto& [key, m] : probe.params) {
        for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = p[off + i];
        off += m.size();
      }
      Rng r(0);
      const Matrix out = encode(probe, src, r, false);
      double acc = 0.0;
      for (int i = 0; i < out.rows(); ++i) {
        for (int j = 0; j < out.cols(); ++j) acc += upstream(i, j) * out(i, j);
      }
      return acc;
    };
    CHECK(finite_diff_check(f, point, analytic, 1e-5) < 1e-6);
  }
}

TEST_CASE("residual stacks keep early-layer gradients alive at depth 12") {
  for (const auto placement : {NormPlacement::kPostNorm, NormPlacement::kPreNorm}) {
    Model model = tiny_model(12, placement, 77);
    const std::vector<int> src = {kBosToken, 3, 4, 5, 6, kEosToken};
    Rng fwd(0);
    GradTape tape;
    const Matrix memory = encode_traced(model, src, fwd, false, tape);
    Rng urng(9);
    const Matrix upstream = random_matrix(urng, memory.rows(), memory.cols());
    ModelParams grads;
    encode_backward(tape, upstream, grads);

    auto layer_norm_of = [&](int layer) {
      double acc = 0.0;
      for (const char* stem : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo", ".ffn.w1",
                               ".ffn.w2"}) {
        const double f = frobenius_norm(grads.at("enc." + std::to_string(layer) + stem));
        acc += f * f;
      }
      return std::sqrt(acc);
    };
    const double first = layer_norm_of(0);
    const double last = layer_norm_of(11);
    CHECK(first > 1e-8 * last);
    CHECK(first > 0.0);
  }
}

TEST_CASE("model_backward zero upstream yields a zero tape") {
  Model model = tiny_model(1, NormPlacement::kPostNorm, 55);
  const std::vector<int> src = {kBosToken, 4, kEosToken};
  const std::vector<int> dec_in = {kBosToken, 5};
  Rng fwd(0);
  GradTape tape;
  const Matrix logits = model_forward_traced(model, src, dec_in, fwd, false, tape);
  model_backward(tape, Matrix(logits.rows(), logits.cols()));
  for (const auto& [key, g] : tape.grads) CHECK(frobenius_norm(g) == 0.0);
}

TEST_CASE("two backward passes over one dropout tape are bit-identical") {
  Model model = tiny_model(2, NormPlacement::kPostNorm, 66);
  model.config.dropout_p = 0.3;
  model.config.attn_dropout_p = 0.2;
  const std::vector<int> src = {kBosToken, 3, 4, 5, kEosToken};
  const std::vector<int> dec_in = {kBosToken, 6, 7};
  const std::vector<int> labels = {6, 7, kEosToken};

  Rng drop_rng(123);
  GradTape tape;
  const Matrix logits = model_forward_traced(model, src, dec_in, drop_rng, true, tape);
  const CrossEntropyResult ce = cross_entropy(logits, labels, 0.1);

  ModelParams grads_a, grads_b;
  model_backward(tape, ce.dlogits, grads_a);
  model_backward(tape, ce.dlogits, grads_b);
  for (const auto& [key, ga] : grads_a) CHECK(bits_equal(ga, grads_b.at(key)));
}

TEST_CASE("gradient accumulation over a batch is order-independent") {
  Model model = tiny_model(1, NormPlacement::kPostNorm, 88);
  std::vector<std::pair<std::vector<int>, std::vector<int>>> batch = {
      {{kBosToken, 3, 4, kEosToken}, {kBosToken, 3, 4}},
      {{kBosToken, 5, kEosToken}, {kBosToken, 6}},
      {{kBosToken, 6, 7, 8, kEosToken}, {kBosToken, 8, 7}},
      {{kBosToken, 4, 4, kEosToken}, {kBosToken, 4, 4}},
  };

  auto grads_for = [&](bool reversed) {
    ModelParams total = zero_grads_like(model.params);
    for (std::size_t idx = 0; idx < batch.size(); ++idx) {
      const auto& [src, dec_in] = batch[reversed ? batch.size() - 1 - idx : idx];
      Rng fwd(0);
      GradTape tape;
      const Matrix logits = model_forward_traced(model, src, dec_in, fwd, false, tape);
      Matrix upstream(logits.rows(), logits.cols());
      Rng urng(static_cast<std::uint64_t>(src.size() * 31 + dec_in.size()));
      for (std::size_t i = 0; i < upstream.size(); ++i) upstream.data()[i] = urng.normal();
      model_backward(tape, upstream, total);
    }
    return total;
  };

  const ModelParams forward_order = grads_for(false);
  const ModelParams reverse_order = grads_for(true);
  for (const auto& [key, g] : forward_order) {
    CHECK(max_abs_diff(g, reverse_order.at(key)) < 1e-12);
  }
}

TEST_CASE("model_backward rejects foreign or mismatched tapes") {
  Model model = tiny_model(1, NormPlacement::kPostNorm, 99);
  GradTape empty;
  CHECK_THROWS_AS(model_backward(empty, Matrix(1, model.config.vocab_size)),
                  std::invalid_argument);

  Rng fwd(0);
  GradTape tape;
  const Matrix logits = model_forward_traced(model, std::vector<int>{kBosToken, 3, kEosToken},
                                             std::vector<int>{kBosToken, 4}, fwd, false, tape);
  CHECK_THROWS_AS(model_backward(tape, Matrix(logits.rows() + 1, logits.cols())),
                  std::invalid_argument);

  GradTape enc_tape;
  encode_traced(model, std::vector<int>{kBosToken, 3, kEosToken}, fwd, false, enc_tape);
  CHECK_THROWS_AS(model_backward(enc_tape, Matrix(1, model.config.vocab_size)),
                  std::invalid_argument);
}

TEST_CASE("finite_diff_check reference behavior") {
  // Quadratic: analytic gradient 2x, nearly exact at h = 1e-5.
  auto quadratic = [](std::span<const double> x) {
    double acc = 0.0;
    for (const double v : x) acc += v * v;
    return acc;
  };
  const std::vector<double> point = {3.0};
  const std::vector<double> analytic = {6.0};
  CHECK(finite_diff_check(quadratic, point, analytic, 1e-5) < 1e-9);

  // Linear functions are exact for central differences up to rounding.
  auto linear = [](std::span<const double> x) { return 4.0 * x[0] - 2.5 * x[1]; };
  const std::vector<double> p2 = {0.7, -0.3};
  const std::vector<double> a2 = {4.0, -2.5};
  CHECK(finite_diff_check(linear, p2, a2, 1e-3) < 1e-10);

  CHECK_THROWS_AS(finite_diff_check(quadratic, point, analytic, 0.0), std::invalid_argument);
  auto bad = [](std::span<const double>) { return std::nan(""); };
  CHECK_THROWS_AS(finite_diff_check(bad, point, analytic, 1e-5), std::runtime_error);
}
