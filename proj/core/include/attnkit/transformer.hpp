#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "attnkit/matrix.hpp"
#include "attnkit/multihead.hpp"
#include "attnkit/rng.hpp"

namespace attnkit {

// Special token ids, fixed by convention.
inline constexpr int kPadToken = 0;
inline constexpr int kBosToken = 1;
inline constexpr int kEosToken = 2;

enum class NormPlacement { kPostNorm, kPreNorm };
enum class ActivationKind { kRelu, kGelu, kSwish };
enum class PeMode { kSinusoidal, kLearned };
enum class EmbedScale { kOne, kSqrtD };

struct ModelConfig {
  int vocab_size = 19;
  int d_model = 64;
  int h = 4;
  int d_ff = 256;
  int n_layers = 2;
  int max_len = 64;
  NormPlacement norm_placement = NormPlacement::kPostNorm;
  ActivationKind activation = ActivationKind::kRelu;
  double swish_beta = 1.0;
  PeMode pe_mode = PeMode::kSinusoidal;
  double dropout_p = 0.0;
  double attn_dropout_p = 0.0;
  double ln_eps = 1e-6;
  EmbedScale embed_scale = EmbedScale::kOne;

  void validate() const;
  double embed_multiplier() const;
  bool operator==(const ModelConfig&) const = default;
};

/// The named tree of all learned parameters. Keys are unique, stable, and
/// canonically ordered (std::map); gradients and optimizer state align to the
/// same keys.
using ModelParams = std::map<std::string, Matrix>;

struct Model {
  ModelConfig config;
  ModelParams params;
};

/// Canonical parameter tree layout for a configuration: key -> (rows, cols).
std::map<std::string, std::pair<int, int>> param_shapes(const ModelConfig& config);

/// Fresh parameters: weights i.i.d. N(0, 1/fan_in), biases and LN beta zero,
/// LN gamma one. Embedding tables use 1/sqrt(d_model).
ModelParams init_params(const ModelConfig& config, Rng& rng);

/// Verifies that params hold exactly the keys and shapes of param_shapes.
void validate_params(const ModelConfig& config, const ModelParams& params);

/// Sinusoidal positional encoding: PE[pos][2i] = sin(pos * w_i),
/// PE[pos][2i+1] = cos(pos * w_i) with w_i = 10000^(-2i/d_model).
/// d_model must be even.
Matrix sinusoidal_pe(int n, int d_model);

/// gamma * (x - mean) / sqrt(var + eps) + beta, population variance.
std::vector<double> layer_norm(std::span<const double> x, std::span<const double> gamma,
                               std::span<const double> beta, double eps);

/// Row-wise layer norm with 1 x d gamma/beta.
Matrix layer_norm_rows(const Matrix& x, const Matrix& gamma, const Matrix& beta, double eps);

double activation_value(ActivationKind kind, double swish_beta, double x);
double activation_derivative(ActivationKind kind, double swish_beta, double x);

/// Position-wise feed-forward: act(x W1 + b1) W2 + b2 on a single vector.
std::vector<double> ffn_forward(std::span<const double> x, const Matrix& w1, const Matrix& b1,
                                const Matrix& w2, const Matrix& b2, ActivationKind activation,
                                double swish_beta = 1.0);

/// Same FFN applied independently to every row.
Matrix ffn_rows(const Matrix& x, const Matrix& w1, const Matrix& b1, const Matrix& w2,
                const Matrix& b2, ActivationKind activation, double swish_beta = 1.0);

/// Residual sub-layer wrapper. PostNorm: LN(x + drop(f(x))).
/// PreNorm: x + drop(f(LN(x))). f must preserve the shape of x.
Matrix sublayer(const Matrix& x, const std::function<Matrix(const Matrix&)>& f,
                NormPlacement placement, const Matrix& gamma, const Matrix& beta, double eps,
                double dropout_p, Rng& rng, bool train_mode);

/// Encoder forward: embedding + positional encoding, then n_layers encoder
/// layers. Returns n x d_model contextual representations.
Matrix encode(const Model& model, std::span<const int> src_tokens, Rng& rng, bool train_mode);

/// Decoder forward over encoder memory; causal self-attention. Returns
/// pre-softmax logits, one row per target position.
Matrix decode(const Model& model, std::span<const int> tgt_tokens, const Matrix& memory,
              Rng& rng, bool train_mode);

/// Iterative argmax decoding from BOS until EOS or max_steps tokens.
/// src_tokens is the encoder input sequence (BOS/EOS framed); the returned
/// sequence carries neither BOS nor EOS.
std::vector<int> greedy_generate(const Model& model, std::span<const int> src_tokens,
                                 int max_steps);

/// Encoder forward that also returns every layer's attention result
/// (weights retained per head). Evaluation mode.
struct EncoderActivations {
  Matrix output;
  std::vector<MhaResult> layers;
};
EncoderActivations encode_with_attention(const Model& model, std::span<const int> src_tokens);

}  // namespace attnkit
