#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "attnkit/attention.hpp"
#include "attnkit/matrix.hpp"
#include "attnkit/transformer.hpp"

namespace attnkit {

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Reverse-mode softmax: given the softmax output a and the upstream
/// gradient, returns a (.) (upstream - <a, upstream>). Equivalent to the full
/// two-case Jacobian product.
std::vector<double> softmax_backward(std::span<const double> a,
                                     std::span<const double> upstream);

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Activations recorded by a single attention forward pass; backward may only
/// run against the tape of its own forward.
struct AttentionTape {
  Matrix q, k, v;
  Matrix weights;
  Mask mask = Mask::none();
  bool scaled = true;
};

struct AttentionGrads {
  Matrix dq, dk, dv;
};

/// attention_batch that also records the tape.
AttentionResult attention_forward_taped(const Matrix& q, const Matrix& k, const Matrix& v,
                                        const Mask& mask, bool scaled, AttentionTape& tape);

/// Exact reverse-mode gradients through weighted sum, softmax, masking, and
/// the 1/sqrt(d_k) scale. Masked positions receive zero score gradient.
AttentionGrads attention_backward(const AttentionTape& tape, const Matrix& upstream);

// ---------------------------------------------------------------------------
// Layer norm
// ---------------------------------------------------------------------------

/// Per-row statistics from a layer_norm_rows forward.
struct LnTrace {
  Matrix xhat;                  // normalized input, pre gamma/beta
  std::vector<double> inv_std;  // 1/sqrt(var + eps) per row
};

struct LayerNormGrads {
  Matrix dx;
  Matrix dgamma;  // 1 x d
  Matrix dbeta;   // 1 x d
};

Matrix layer_norm_rows_traced(const Matrix& x, const Matrix& gamma, const Matrix& beta,
                              double eps, LnTrace& trace);
LayerNormGrads layer_norm_backward(const LnTrace& trace, const Matrix& gamma,
                                   const Matrix& upstream);

// ---------------------------------------------------------------------------
// Model tape
// ---------------------------------------------------------------------------

struct DropoutTrace {
  Matrix mask;     // 1 kept / 0 dropped
  double p = 0.0;
  bool active = false;  // train mode with p > 0
};

struct HeadTrace {
  Matrix q, k, v;  // per-head projections, n x d_k / d_v
  Matrix weights;
  DropoutTrace attn_drop;
};

struct MhaTrace {
  Matrix xq, xk, xv;  // the sub-layer inputs the projections were applied to
  Mask mask = Mask::none();
  std::vector<HeadTrace> heads;
  Matrix concat;  // merged head outputs, pre output-projection
};

struct FfnTrace {
  Matrix x;    // input rows
  Matrix pre;  // x W1 + b1
  Matrix act;  // activation(pre)
};

struct EncLayerTrace {
  MhaTrace attn;
  DropoutTrace attn_drop;
  LnTrace ln1;
  FfnTrace ffn;
  DropoutTrace ffn_drop;
  LnTrace ln2;
};

struct DecLayerTrace {
  MhaTrace self_attn;
  DropoutTrace self_drop;
  LnTrace ln1;
  MhaTrace cross_attn;
  DropoutTrace cross_drop;
  LnTrace ln2;
  FfnTrace ffn;
  DropoutTrace ffn_drop;
  LnTrace ln3;
};

struct EmbedTrace {
  std::vector<int> tokens;
  DropoutTrace drop;
};

/// Gradient accumulator keyed identically to ModelParams, plus every cached
/// activation the backward pass needs. A tape belongs to the forward pass
/// that filled it; model_backward rejects foreign tapes.
struct GradTape {
  // Cached forward activations.
  EmbedTrace src_embed;
  EmbedTrace tgt_embed;
  std::vector<EncLayerTrace> enc_layers;
  std::vector<DecLayerTrace> dec_layers;
  LnTrace final_ln;
  Matrix memory;   // encoder output
  Matrix dec_out;  // input to the output projection

  // Per-parameter gradients, filled by model_backward.
  ModelParams grads;

  const Model* owner = nullptr;
  bool has_encoder = false;
  bool has_decoder = false;
};

/// Full training-mode forward (encoder + decoder), recording the tape.
/// Returns logits, one row per target position.
Matrix model_forward_traced(const Model& model, std::span<const int> src_tokens,
                            std::span<const int> tgt_tokens, Rng& rng, bool train_mode,
                            GradTape& tape);

/// Encoder-only traced forward (for encoder-side gradient checks).
Matrix encode_traced(const Model& model, std::span<const int> src_tokens, Rng& rng,
                     bool train_mode, GradTape& tape);

/// Reverse pass from the loss gradient at the logits; fills tape.grads for
/// every parameter. Residual branches accumulate additively.
void model_backward(const GradTape& tape, const Matrix& dlogits, ModelParams& grads);
inline void model_backward(GradTape& tape, const Matrix& dlogits) {
  model_backward(tape, dlogits, tape.grads);
}

/// Backward for an encoder-only traced forward, from the gradient at the
/// encoder output.
void encode_backward(const GradTape& tape, const Matrix& dmemory, ModelParams& grads);

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central-difference check of an analytic gradient. For each coordinate i,
/// compares (f(x + h e_i) - f(x - h e_i)) / 2h against analytic[i] and
/// returns the maximum relative error, with the denominator floored at 1e-8.
double finite_diff_check(const std::function<double(std::span<const double>)>& f,
                         std::span<const double> point, std::span<const double> analytic,
                         double h);

ModelParams zero_grads_like(const ModelParams& params);

}  // namespace attnkit
