#include "attnkit/training.hpp"

#include <cmath>
#include <stdexcept>

#include <json.hpp>

namespace attnkit {

// ---------------------------------------------------------------------------
// Dropout (declared in dropout.hpp)
// ---------------------------------------------------------------------------

DropoutResult dropout_apply(const Matrix& x, double p, Rng& rng, bool train_mode) {
  if (p < 0.0 || p >= 1.0) {
    throw std::invalid_argument("dropout: p must be in [0, 1), got " + std::to_string(p));
  }
  DropoutResult r;
  if (!train_mode || p == 0.0) {
    r.output = x;
    r.mask = Matrix(x.rows(), x.cols());
    for (std::size_t i = 0; i < r.mask.size(); ++i) r.mask.data()[i] = 1.0;
    return r;
  }
  r.output = Matrix(x.rows(), x.cols());
  r.mask = Matrix(x.rows(), x.cols());
  const double inv_keep = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (rng.uniform() < p) {
      r.mask.data()[i] = 0.0;
    } else {
      r.mask.data()[i] = 1.0;
      r.output.data()[i] = x.data()[i] * inv_keep;
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
    throw std::invalid_argument("train: betas must be in [0, 1)");
  }
  if (adam_eps <= 0.0) throw std::invalid_argument("train: adam_eps must be positive");
  if (warmup_steps < 1) throw std::invalid_argument("train: warmup_steps must be >= 1");
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
    throw std::invalid_argument("train: label_smoothing must be in [0, 1)");
  }
  if (clip_threshold <= 0.0) throw std::invalid_argument("train: clip_threshold must be positive");
  if (weight_decay < 0.0) throw std::invalid_argument("train: weight_decay must be nonnegative");
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (max_steps < 0) throw std::invalid_argument("train: max_steps must be >= 0");
  if (eval_every < 1) throw std::invalid_argument("train: eval_every must be >= 1");
  if (eval_examples < 1) throw std::invalid_argument("train: eval_examples must be >= 1");
}

std::vector<double> smoothed_targets(int label, int vocab_size, double smoothing) {
  if (label < 0 || label >= vocab_size) {
    throw std::out_of_range("smoothed_targets: label " + std::to_string(label) +
                            " outside vocab of " + std::to_string(vocab_size));
  }
  std::vector<double> row(vocab_size, smoothing / vocab_size);
  row[label] += 1.0 - smoothing;
  return row;
}

namespace {

CrossEntropyParts cross_entropy_impl(const Matrix& logits, std::span<const int> targets,
                                     double smoothing) {
  if (static_cast<int>(targets.size()) != logits.rows()) {
    throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(logits.rows()) + " logit rows");
  }
  if (smoothing < 0.0 || smoothing >= 1.0) {
    throw std::invalid_argument("cross_entropy: smoothing must be in [0, 1)");
  }
  const int vocab = logits.cols();
  CrossEntropyParts parts;
  parts.dlogits = Matrix(logits.rows(), vocab);
  const double uniform = smoothing / vocab;

  for (int t = 0; t < logits.rows(); ++t) {
    const int y = targets[t];
    if (y < 0 || y >= vocab) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(y) +
                              " outside vocab of " + std::to_string(vocab));
    }
    if (y == kPadToken) continue;
    ++parts.token_count;

    const double* z = logits.row(t);
    double mx = z[0];
    for (int v = 1; v < vocab; ++v) mx = std::max(mx, z[v]);
    double sum_exp = 0.0;
    double sum_z = 0.0;
    for (int v = 0; v < vocab; ++v) {
      sum_exp += std::exp(z[v] - mx);
      sum_z += z[v];
    }
    const double lse = mx + std::log(sum_exp);
    // L_t = lse - sum_v ytilde_v z_v with ytilde the smoothed one-hot.
    parts.loss_sum += lse - (1.0 - smoothing) * z[y] - uniform * sum_z;

    double* d = parts.dlogits.row(t);
    const double inv_sum = 1.0 / sum_exp;
    for (int v = 0; v < vocab; ++v) d[v] = std::exp(z[v] - mx) * inv_sum - uniform;
    d[y] -= 1.0 - smoothing;
  }
  return parts;
}

}  // namespace

CrossEntropyParts cross_entropy_parts(const Matrix& logits, std::span<const int> targets,
                                      double smoothing) {
  return cross_entropy_impl(logits, targets, smoothing);
}

CrossEntropyResult cross_entropy(const Matrix& logits, std::span<const int> targets,
                                 double smoothing) {
  CrossEntropyParts parts = cross_entropy_impl(logits, targets, smoothing);
  CrossEntropyResult res;
  if (parts.token_count == 0) {
    res.loss = 0.0;
    res.dlogits = std::move(parts.dlogits);
    return res;
  }
  const double inv = 1.0 / parts.token_count;
  res.loss = parts.loss_sum * inv;
  for (std::size_t i = 0; i < parts.dlogits.size(); ++i) parts.dlogits.data()[i] *= inv;
  res.dlogits = std::move(parts.dlogits);
  return res;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

double lr_schedule(long long t, int d_model, int warmup_steps) {
  if (t < 1) throw std::invalid_argument("lr_schedule: t must be >= 1");
  if (d_model < 1 || warmup_steps < 1) {
    throw std::invalid_argument("lr_schedule: d_model and warmup_steps must be positive");
  }
  const double td = static_cast<double>(t);
  const double wd = static_cast<double>(warmup_steps);
  return std::pow(static_cast<double>(d_model), -0.5) *
         std::min(std::pow(td, -0.5), td * std::pow(wd, -1.5));
}

OptimizerState OptimizerState::init(const ModelParams& params) {
  OptimizerState s;
  s.m = zero_grads_like(params);
  s.v = zero_grads_like(params);
  s.t = 0;
  return s;
}

namespace {

void check_same_keys(const ModelParams& a, const ModelParams& b, const char* what) {
  if (a.size() != b.size()) {
    throw std::invalid_argument(std::string("adam_step: ") + what + " key count mismatch");
  }
  auto ai = a.begin();
  auto bi = b.begin();
  for (; ai != a.end(); ++ai, ++bi) {
    if (ai->first != bi->first || !ai->second.same_shape(bi->second)) {
      throw std::invalid_argument(std::string("adam_step: ") + what + " mismatch at key '" +
                                  ai->first + "'");
    }
  }
}

}  // namespace

void adam_step(ModelParams& params, const ModelParams& grads, OptimizerState& state,
               double lr_t, const TrainConfig& config) {
  check_same_keys(params, grads, "grads");
  check_same_keys(params, state.m, "state.m");
  check_same_keys(params, state.v, "state.v");

  state.t += 1;
  const double b1 = config.beta1;
  const double b2 = config.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  const double lambda = config.weight_decay;

  auto pi = params.begin();
  auto gi = grads.begin();
  auto mi = state.m.begin();
  auto vi = state.v.begin();
  for (; pi != params.end(); ++pi, ++gi, ++mi, ++vi) {
    double* theta = pi->second.data();
    const double* g = gi->second.data();
    double* m = mi->second.data();
    double* v = vi->second.data();
    const std::size_t n = pi->second.size();
    for (std::size_t i = 0; i < n; ++i) {
      double gi_val = g[i];
      if (lambda != 0.0 && !config.decoupled_decay) gi_val += lambda * theta[i];
      m[i] = b1 * m[i] + (1.0 - b1) * gi_val;
      v[i] = b2 * v[i] + (1.0 - b2) * gi_val * gi_val;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      theta[i] -= lr_t * m_hat / (std::sqrt(v_hat) + config.adam_eps);
      if (lambda != 0.0 && config.decoupled_decay) theta[i] -= lr_t * lambda * theta[i];
    }
  }
}

double global_grad_norm(const ModelParams& grads) {
  double acc = 0.0;
  for (const auto& [key, g] : grads) {
    for (std::size_t i = 0; i < g.size(); ++i) acc += g.data()[i] * g.data()[i];
  }
  return std::sqrt(acc);
}

double clip_gradients(ModelParams& grads, double threshold) {
  if (threshold <= 0.0) throw std::invalid_argument("clip_gradients: threshold must be positive");
  const double norm = global_grad_norm(grads);
  if (norm > threshold) {
    const double s = threshold / norm;
    for (auto& [key, g] : grads) {
      for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] *= s;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace {

std::vector<int> shifted_input(const std::vector<int>& tgt) {
  return std::vector<int>(tgt.begin(), tgt.end() - 1);
}

std::vector<int> labels_of(const std::vector<int>& tgt) {
  return std::vector<int>(tgt.begin() + 1, tgt.end());
}

void write_metrics_line(std::ostream& out, const StepRecord& rec) {
  nlohmann::ordered_json line;
  line["step"] = rec.step;
  line["lr"] = rec.lr;
  line["loss"] = rec.loss;
  line["grad_norm"] = rec.grad_norm;
  line["clipped_grad_norm"] = rec.clipped_grad_norm;
  if (rec.accuracy) line["accuracy"] = *rec.accuracy;
  out << line.dump() << '\n';
}

}  // namespace

double teacher_forced_accuracy(const Model& model, std::span<const TokenPair> examples) {
  Rng rng(0);  // eval mode draws nothing
  long long matched = 0;
  long long total = 0;
  for (const auto& [src, tgt] : examples) {
    if (tgt.size() < 2) throw std::invalid_argument("accuracy: target shorter than BOS+EOS");
    const std::vector<int> dec_in = shifted_input(tgt);
    const std::vector<int> labels = labels_of(tgt);
    const Matrix memory = encode(model, src, rng, /*train_mode=*/false);
    const Matrix logits = decode(model, dec_in, memory, rng, /*train_mode=*/false);
    for (std::size_t t = 0; t < labels.size(); ++t) {
      if (labels[t] == kPadToken) continue;
      const double* row = logits.row(static_cast<int>(t));
      int best = 0;
      for (int v = 1; v < logits.cols(); ++v) {
        if (row[v] > row[best]) best = v;
      }
      ++total;
      if (best == labels[t]) ++matched;
    }
  }
  return total == 0 ? 1.0 : static_cast<double>(matched) / static_cast<double>(total);
}

TrainResult train(Model& model, const TrainConfig& tcfg, const TaskSpec& task,
                  std::ostream* metrics_out) {
  tcfg.validate();
  task.validate();
  model.config.validate();
  if (model.config.vocab_size < task.model_vocab()) {
    throw std::invalid_argument("train: model vocab " + std::to_string(model.config.vocab_size) +
                                " too small for task vocab " + std::to_string(task.model_vocab()));
  }
  if (model.config.pe_mode == PeMode::kLearned && task.max_len + 2 > model.config.max_len) {
    throw std::invalid_argument("train: task max_len + 2 exceeds model max_len");
  }

  Rng root(tcfg.seed);
  Rng task_rng = root.split();
  Rng dropout_rng = root.split();
  Rng heldout_rng = root.split();

  std::vector<TokenPair> heldout;
  heldout.reserve(tcfg.eval_examples);
  for (int i = 0; i < tcfg.eval_examples; ++i) heldout.push_back(sample_pair(task, heldout_rng));

  OptimizerState state = OptimizerState::init(model.params);
  TrainResult result;
  result.records.reserve(tcfg.max_steps);

  for (int step = 1; step <= tcfg.max_steps; ++step) {
    ModelParams grads = zero_grads_like(model.params);
    double loss_sum = 0.0;
    int token_count = 0;
    for (int b = 0; b < tcfg.batch_size; ++b) {
      const TokenPair pair = sample_pair(task, task_rng);
      const std::vector<int> dec_in = shifted_input(pair.second);
      const std::vector<int> labels = labels_of(pair.second);
      GradTape tape;
      const Matrix logits = model_forward_traced(model, pair.first, dec_in, dropout_rng,
                                                 /*train_mode=*/true, tape);
      CrossEntropyParts parts = cross_entropy_parts(logits, labels, tcfg.label_smoothing);
      loss_sum += parts.loss_sum;
      token_count += parts.token_count;
      model_backward(tape, parts.dlogits, grads);
    }
    const double loss = token_count > 0 ? loss_sum / token_count : 0.0;
    if (!std::isfinite(loss)) {
      throw std::runtime_error("train: non-finite loss at step " + std::to_string(step));
    }
    if (token_count > 0) {
      const double inv = 1.0 / token_count;
      for (auto& [key, g] : grads) {
        for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] *= inv;
      }
    }

    const double pre_norm = clip_gradients(grads, tcfg.clip_threshold);
    const double post_norm = std::min(pre_norm, tcfg.clip_threshold);
    const double lr_t = lr_schedule(step, model.config.d_model, tcfg.warmup_steps);
    adam_step(model.params, grads, state, lr_t, tcfg);

    StepRecord rec{step, lr_t, loss, pre_norm, post_norm, std::nullopt};
    const bool eval_now = (step % tcfg.eval_every == 0) || step == tcfg.max_steps;
    if (eval_now) {
      rec.accuracy = teacher_forced_accuracy(model, heldout);
      result.final_accuracy = *rec.accuracy;
    }
    if (metrics_out) write_metrics_line(*metrics_out, rec);
    result.records.push_back(std::move(rec));
    result.steps_completed = step;

    if (eval_now && tcfg.target_accuracy > 0.0 &&
        result.final_accuracy >= tcfg.target_accuracy) {
      break;
    }
  }
  return result;
}

}  // namespace attnkit
