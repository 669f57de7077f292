#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "attnkit/autograd.hpp"
#include "attnkit/dropout.hpp"
#include "attnkit/tasks.hpp"
#include "attnkit/transformer.hpp"

namespace attnkit {

struct TrainConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int warmup_steps = 4000;
  double label_smoothing = 0.1;
  double clip_threshold = 1.0;
  double weight_decay = 0.0;
  bool decoupled_decay = false;
  int batch_size = 32;
  int max_steps = 10000;
  std::uint64_t seed = 42;
  // Held-out evaluation cadence and early stop (0 disables the early stop).
  int eval_every = 100;
  int eval_examples = 64;
  double target_accuracy = 0.0;

  void validate() const;
};

/// Adam first/second moments, keyed like ModelParams, plus the step counter.
struct OptimizerState {
  ModelParams m;
  ModelParams v;
  long long t = 0;

  static OptimizerState init(const ModelParams& params);
};

struct CrossEntropyResult {
  double loss;     // mean over non-PAD positions
  Matrix dlogits;  // (softmax - smoothed target) / non-PAD count
};

/// Label-smoothed sequence cross-entropy with log-sum-exp max-subtraction.
/// PAD targets are excluded from the mean and get zero gradient rows.
CrossEntropyResult cross_entropy(const Matrix& logits, std::span<const int> targets,
                                 double smoothing);

/// Sum form (no 1/count scaling) for batch-level reductions.
struct CrossEntropyParts {
  double loss_sum = 0.0;
  int token_count = 0;
  Matrix dlogits;  // softmax - smoothed target per non-PAD row
};
CrossEntropyParts cross_entropy_parts(const Matrix& logits, std::span<const int> targets,
                                      double smoothing);

/// Smoothed target distribution for one label: 1 - eps + eps/|V| on the true
/// class, eps/|V| elsewhere.
std::vector<double> smoothed_targets(int label, int vocab_size, double smoothing);

/// Warmup schedule: d_model^-0.5 * min(t^-0.5, t * warmup^-1.5). t >= 1.
double lr_schedule(long long t, int d_model, int warmup_steps);

/// One Adam update with bias correction. Coupled weight decay adds
/// lambda*theta to the gradient before the moment updates; decoupled decay
/// subtracts lr*lambda*theta after the adaptive update.
void adam_step(ModelParams& params, const ModelParams& grads, OptimizerState& state,
               double lr_t, const TrainConfig& config);

/// Scales the whole gradient tree so its global Frobenius norm is at most
/// threshold. Returns the pre-clip norm.
double clip_gradients(ModelParams& grads, double threshold);

double global_grad_norm(const ModelParams& grads);

struct StepRecord {
  int step;
  double lr;
  double loss;
  double grad_norm;
  double clipped_grad_norm;
  std::optional<double> accuracy;
};

struct TrainResult {
  std::vector<StepRecord> records;
  int steps_completed = 0;
  double final_accuracy = 0.0;
};

/// Teacher-forced training loop: decoder input is the target shifted right
/// (BOS first). Per-step metrics go to `metrics_out` as one JSON object per
/// line when provided. Deterministic given (model params, configs, seed).
TrainResult train(Model& model, const TrainConfig& tcfg, const TaskSpec& task,
                  std::ostream* metrics_out);

/// Teacher-forced argmax token accuracy over a fixed example set.
double teacher_forced_accuracy(const Model& model, std::span<const TokenPair> examples);

}  // namespace attnkit
