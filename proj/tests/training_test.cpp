#include <doctest.h>

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "attnkit/autograd.hpp"
#include "attnkit/training.hpp"
#include "test_helpers.hpp"

using namespace attnkit;
using namespace attnkit::testing;

namespace {

Model small_model(int vocab, std::uint64_t seed) {
  Model m;
  m.config.vocab_size = vocab;
  m.config.d_model = 32;
  m.config.h = 2;
  m.config.d_ff = 64;
  m.config.n_layers = 1;
  m.config.max_len = 32;
  Rng rng(seed);
  m.params = init_params(m.config, rng);
  return m;
}

}  // namespace

TEST_CASE("smoothed targets mix the label with a uniform floor") {
  const auto row = smoothed_targets(3, 10, 0.1);
  CHECK(row[3] == doctest::Approx(0.91).epsilon(1e-14));
  for (int v = 0; v < 10; ++v) {
    if (v != 3) CHECK(row[v] == doctest::Approx(0.01).epsilon(1e-14));
  }

  Rng rng(1);
  for (int trial = 0; trial < 40; ++trial) {
    const int vocab = 2 + static_cast<int>(rng.below(40));
    const double eps = rng.uniform() * 0.9;
    const int label = static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab)));
    double sum = 0.0;
    for (const double p : smoothed_targets(label, vocab, eps)) sum += p;
    CHECK(std::abs(sum - 1.0) < 1e-13);
  }
}

TEST_CASE("cross entropy of uniform logits is log |V|") {
  const int vocab = 12;
  Matrix logits(3, vocab);
  for (std::size_t i = 0; i < logits.size(); ++i) logits.data()[i] = 0.7;
  const std::vector<int> targets = {4, 9, 1};
  const CrossEntropyResult res = cross_entropy(logits, targets, 0.0);
  CHECK(res.loss == doctest::Approx(std::log(static_cast<double>(vocab))).epsilon(1e-12));
}

TEST_CASE("cross entropy dlogits rows sum to zero when smoothing is off") {
  Rng rng(2);
  const Matrix logits = random_matrix(rng, 4, 9, -3.0, 3.0);
  const std::vector<int> targets = {1, kPadToken, 5, 8};
  const CrossEntropyResult res = cross_entropy(logits, targets, 0.0);
  for (int t = 0; t < 4; ++t) {
    double sum = 0.0;
    for (int v = 0; v < 9; ++v) sum += res.dlogits(t, v);
    CHECK(std::abs(sum) < 1e-12);
  }
  // PAD row carries no gradient and is excluded from the mean.
  for (int v = 0; v < 9; ++v) CHECK(res.dlogits(1, v) == 0.0);

  CHECK_THROWS_AS(cross_entropy(logits, std::vector<int>{1, 2, 3, 99}, 0.0), std::out_of_range);
}

TEST_CASE("cross entropy gradient matches finite differences on a 3x7 instance") {
  Rng rng(3);
  const Matrix logits = random_matrix(rng, 3, 7, -2.0, 2.0);
  const std::vector<int> targets = {2, 6, 3};
  const double eps = 0.1;
  const CrossEntropyResult res = cross_entropy(logits, targets, eps);

  std::vector<double> point(logits.data(), logits.data() + logits.size());
  std::vector<double> analytic(res.dlogits.data(), res.dlogits.data() + res.dlogits.size());
  auto f = [&](std::span<const double> p) {
    const Matrix m(3, 7, std::vector<double>(p.begin(), p.end()));
    return cross_entropy(m, targets, eps).loss;
  };
  CHECK(finite_diff_check(f, point, analytic, 1e-5) < 1e-6);
}

TEST_CASE("cross entropy is stable for huge logits") {
  Matrix logits(1, 4);
  logits(0, 0) = 1e6;
  logits(0, 1) = -1e6;
  logits(0, 2) = 0.0;
  logits(0, 3) = 5.0;
  const CrossEntropyResult res = cross_entropy(logits, std::vector<int>{3}, 0.1);
  CHECK(std::isfinite(res.loss));
  CHECK(res.dlogits.all_finite());
}

TEST_CASE("lr schedule: branch continuity and frozen spot values") {
  const int warmup = 4000, d = 512;
  const double at_peak = lr_schedule(warmup, d, warmup);
  const double warm_branch = std::pow(512.0, -0.5) * warmup * std::pow(4000.0, -1.5);
  const double decay_branch = std::pow(512.0, -0.5) * std::pow(4000.0, -0.5);
  CHECK(std::abs(warm_branch - decay_branch) <= 1e-15 * decay_branch);
  CHECK(at_peak == doctest::Approx(6.9877124296868428e-4).epsilon(1e-12));

  CHECK(lr_schedule(1, d, warmup) == doctest::Approx(1.7469281074217107e-7).epsilon(1e-10));
  CHECK(lr_schedule(16000, d, warmup) == doctest::Approx(3.4938562148434214e-4).epsilon(1e-10));

  CHECK_THROWS_AS(lr_schedule(0, d, warmup), std::invalid_argument);
}

TEST_CASE("lr schedule rises before warmup and decays after") {
  const int warmup = 4000, d = 512;
  double prev = lr_schedule(1, d, warmup);
  for (int t = 2; t <= warmup; ++t) {
    const double cur = lr_schedule(t, d, warmup);
    CHECK(cur > prev);
    prev = cur;
  }
  for (int t = warmup + 1; t <= 10 * warmup; ++t) {
    const double cur = lr_schedule(t, d, warmup);
    CHECK(cur < prev);
    prev = cur;
  }
}

TEST_CASE("adam first step moves by roughly minus lr on unit gradients") {
  ModelParams params;
  params.emplace("w", Matrix(2, 2, {1.0, -2.0, 0.5, 3.0}));
  ModelParams grads;
  grads.emplace("w", Matrix(2, 2, {1.0, 1.0, 1.0, 1.0}));
  OptimizerState state = OptimizerState::init(params);
  TrainConfig cfg;
  cfg.weight_decay = 0.0;

  const Matrix before = params.at("w");
  adam_step(params, grads, state, 0.1, cfg);
  CHECK(state.t == 1);
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      CHECK(params.at("w")(i, j) == doctest::Approx(before(i, j) - 0.1).epsilon(1e-7));
    }
  }

  // Zero gradient from fresh state: parameters unchanged, counter advances.
  ModelParams params2;
  params2.emplace("w", Matrix(2, 2, {1.0, -2.0, 0.5, 3.0}));
  ModelParams zero;
  zero.emplace("w", Matrix(2, 2));
  OptimizerState fresh = OptimizerState::init(params2);
  const Matrix snapshot = params2.at("w");
  adam_step(params2, zero, fresh, 0.1, cfg);
  CHECK(fresh.t == 1);
  CHECK(bits_equal(params2.at("w"), snapshot));
}

TEST_CASE("adam matches an independent scalar transcription for three steps") {
  // Reference: plain scalar Adam on f(x) = (x - 3)^2 / 2, gradient x - 3.
  double x_ref = 0.0, m_ref = 0.0, v_ref = 0.0;
  const double alpha = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;

  ModelParams params;
  params.emplace("x", Matrix(1, 1, {0.0}));
  OptimizerState state = OptimizerState::init(params);
  TrainConfig cfg;

  for (int t = 1; t <= 3; ++t) {
    const double g = x_ref - 3.0;
    m_ref = b1 * m_ref + (1 - b1) * g;
    v_ref = b2 * v_ref + (1 - b2) * g * g;
    const double mhat = m_ref / (1 - std::pow(b1, t));
    const double vhat = v_ref / (1 - std::pow(b2, t));
    x_ref -= alpha * mhat / (std::sqrt(vhat) + eps);

    ModelParams grads;
    grads.emplace("x", Matrix(1, 1, {params.at("x")(0, 0) - 3.0}));
    adam_step(params, grads, state, alpha, cfg);
    CHECK(params.at("x")(0, 0) == doctest::Approx(x_ref).epsilon(1e-12));
  }
}

TEST_CASE("adam halving the learning rate exactly halves the first displacement") {
  auto first_step = [](double alpha) {
    ModelParams params;
    params.emplace("x", Matrix(1, 3));
    ModelParams grads;
    grads.emplace("x", Matrix(1, 3, {0.3, -1.7, 0.004}));
    OptimizerState state = OptimizerState::init(params);
    TrainConfig cfg;
    adam_step(params, grads, state, alpha, cfg);
    return params.at("x");
  };
  const Matrix full = first_step(0.2);
  const Matrix half = first_step(0.1);
  for (int j = 0; j < 3; ++j) CHECK(half(0, j) == full(0, j) / 2.0);
}

TEST_CASE("adam weight decay variants") {
  TrainConfig cfg;
  cfg.weight_decay = 0.5;

  // Coupled: lambda*theta joins the gradient before the moments.
  ModelParams params;
  params.emplace("x", Matrix(1, 1, {2.0}));
  OptimizerState state = OptimizerState::init(params);
  cfg.decoupled_decay = false;
  adam_step(params, ModelParams{{"x", Matrix(1, 1, {0.0})}}, state, 0.1, cfg);
  // g_eff = 1.0, so the bias-corrected step is ~ -0.1.
  CHECK(params.at("x")(0, 0) == doctest::Approx(1.9).epsilon(1e-6));

  // Decoupled: adaptive part sees zero gradient; decay acts directly.
  ModelParams params2;
  params2.emplace("x", Matrix(1, 1, {2.0}));
  OptimizerState state2 = OptimizerState::init(params2);
  cfg.decoupled_decay = true;
  adam_step(params2, ModelParams{{"x", Matrix(1, 1, {0.0})}}, state2, 0.1, cfg);
  CHECK(params2.at("x")(0, 0) == doctest::Approx(2.0 - 0.1 * 0.5 * 2.0).epsilon(1e-12));

  ModelParams wrong;
  wrong.emplace("y", Matrix(1, 1));
  CHECK_THROWS_AS(adam_step(params, wrong, state, 0.1, cfg), std::invalid_argument);
}

TEST_CASE("gradient clipping preserves direction and caps the global norm") {
  ModelParams grads;
  grads.emplace("g", Matrix(1, 2, {3.0, 4.0}));
  const double pre = clip_gradients(grads, 1.0);
  CHECK(pre == doctest::Approx(5.0).epsilon(1e-15));
  CHECK(grads.at("g")(0, 0) == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(grads.at("g")(0, 1) == doctest::Approx(0.8).epsilon(1e-12));

  ModelParams small;
  small.emplace("g", Matrix(1, 2, {0.3, 0.4}));
  const Matrix before = small.at("g");
  CHECK(clip_gradients(small, 1.0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(bits_equal(small.at("g"), before));

  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    ModelParams tree;
    tree.emplace("a", random_matrix(rng, 3, 4, -2.0, 2.0));
    tree.emplace("b", random_matrix(rng, 2, 2, -2.0, 2.0));
    const double theta = 0.25 + rng.uniform() * 3.0;
    const double pre_norm = clip_gradients(tree, theta);
    const double post_norm = global_grad_norm(tree);
    CHECK(std::abs(post_norm - std::min(pre_norm, theta)) < 1e-12);
  }
}

TEST_CASE("dropout identity paths") {
  Rng rng(5);
  const Matrix x = random_matrix(rng, 4, 4);

  const DropoutResult off = dropout_apply(x, 0.0, rng, true);
  CHECK(bits_equal(off.output, x));
  for (std::size_t i = 0; i < off.mask.size(); ++i) CHECK(off.mask.data()[i] == 1.0);

  const DropoutResult eval = dropout_apply(x, 0.7, rng, false);
  CHECK(bits_equal(eval.output, x));

  CHECK_THROWS_AS(dropout_apply(x, 1.0, rng, true), std::invalid_argument);
}

TEST_CASE("inverted dropout is unbiased at p = 0.5") {
  Rng rng(6);
  Matrix ones(1000, 1000);
  for (std::size_t i = 0; i < ones.size(); ++i) ones.data()[i] = 1.0;
  const DropoutResult r = dropout_apply(ones, 0.5, rng, true);
  double mean = 0.0;
  for (std::size_t i = 0; i < r.output.size(); ++i) {
    mean += r.output.data()[i];
    const double m = r.mask.data()[i];
    CHECK((m == 0.0 || m == 1.0));
  }
  mean /= static_cast<double>(r.output.size());
  CHECK(std::abs(mean - 1.0) < 0.01);
}

TEST_CASE("train with zero steps leaves parameters untouched") {
  Model model = small_model(19, 7);
  const ModelParams before = model.params;
  TrainConfig tcfg;
  tcfg.max_steps = 0;
  TaskSpec task;
  std::ostringstream metrics;
  const TrainResult result = train(model, tcfg, task, &metrics);
  CHECK(result.records.empty());
  CHECK(metrics.str().empty());
  for (const auto& [key, m] : before) CHECK(bits_equal(m, model.params.at(key)));
}

TEST_CASE("identical seeds give byte-identical metrics and parameters") {
  auto run = [] {
    Model model = small_model(19, 7);
    TrainConfig tcfg;
    tcfg.max_steps = 25;
    tcfg.eval_every = 10;
    tcfg.seed = 2024;
    TaskSpec task;
    task.seed = tcfg.seed;
    std::ostringstream metrics;
    train(model, tcfg, task, &metrics);
    return std::make_pair(metrics.str(), std::move(model.params));
  };
  const auto [log_a, params_a] = run();
  const auto [log_b, params_b] = run();
  CHECK(log_a == log_b);
  CHECK(!log_a.empty());
  for (const auto& [key, m] : params_a) CHECK(bits_equal(m, params_b.at(key)));
}

TEST_CASE("metrics lines are JSON objects with the expected keys") {
  Model model = small_model(19, 8);
  TrainConfig tcfg;
  tcfg.max_steps = 10;
  tcfg.eval_every = 5;
  TaskSpec task;
  std::ostringstream metrics;
  train(model, tcfg, task, &metrics);

  std::istringstream lines(metrics.str());
  std::string line;
  int count = 0;
  while (std::getline(lines, line)) {
    ++count;
    CHECK(line.find("\"step\":") != std::string::npos);
    CHECK(line.find("\"lr\":") != std::string::npos);
    CHECK(line.find("\"loss\":") != std::string::npos);
    CHECK(line.find("\"grad_norm\":") != std::string::npos);
    CHECK(line.find("\"clipped_grad_norm\":") != std::string::npos);
    if (count % 5 == 0) CHECK(line.find("\"accuracy\":") != std::string::npos);
  }
  CHECK(count == 10);
}

TEST_CASE("loss trends down over 100 copy-task steps with default config") {
  Model model = small_model(19, 9);
  TrainConfig tcfg;
  tcfg.max_steps = 100;
  TaskSpec task;
  task.seed = tcfg.seed;
  const TrainResult result = train(model, tcfg, task, nullptr);
  REQUIRE(result.records.size() == 100);

  auto median_of = [&](int lo, int hi) {  // inclusive, 1-based steps
    std::vector<double> losses;
    for (int s = lo; s <= hi; ++s) losses.push_back(result.records[s - 1].loss);
    std::sort(losses.begin(), losses.end());
    return losses[losses.size() / 2];
  };
  CHECK(median_of(90, 100) < median_of(1, 10));
}

TEST_CASE("non-finite loss aborts with the failing step named") {
  Model model = small_model(19, 10);
  model.params.at("out.w")(0, 0) = std::numeric_limits<double>::quiet_NaN();
  TrainConfig tcfg;
  tcfg.max_steps = 3;
  TaskSpec task;
  CHECK_THROWS_WITH_AS(train(model, tcfg, task, nullptr),
                       "train: non-finite loss at step 1", std::runtime_error);
}
