#include "attnkit/autograd.hpp"

#include <cmath>
#include <stdexcept>

#include "attnkit/multihead.hpp"

namespace attnkit {

std::vector<double> softmax_backward(std::span<const double> a,
                                     std::span<const double> upstream) {
  if (a.size() != upstream.size()) {
    throw std::invalid_argument("softmax_backward: length mismatch " + std::to_string(a.size()) +
                                " vs " + std::to_string(upstream.size()));
  }
  double inner = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) inner += a[i] * upstream[i];
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * (upstream[i] - inner);
  return out;
}

// ---------------------------------------------------------------------------
// Attention backward
// ---------------------------------------------------------------------------

namespace {

Matrix dropout_backward(const DropoutTrace& trace, const Matrix& upstream) {
  if (!trace.active) return upstream;
  Matrix out = hadamard(upstream, trace.mask);
  const double inv_keep = 1.0 / (1.0 - trace.p);
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= inv_keep;
  return out;
}

// Gradients through output = drop(softmax(mask(Q K^T / sqrt(d_k)))) V given
// the retained weight matrix A. Masked positions get exactly zero score
// gradient.
AttentionGrads attention_core_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                                       const Matrix& weights, const Mask& mask, bool scaled,
                                       const DropoutTrace* attn_drop, const Matrix& upstream) {
  if (upstream.rows() != q.rows() || upstream.cols() != v.cols()) {
    throw std::invalid_argument("attention backward: upstream " + shape_string(upstream) +
                                " does not match output " + std::to_string(q.rows()) + "x" +
                                std::to_string(v.cols()));
  }
  const bool dropped = attn_drop != nullptr && attn_drop->active;
  Matrix weights_eff = weights;
  if (dropped) weights_eff = dropout_backward(*attn_drop, weights);  // A (.) mask / (1-p)

  // dL/dv_j = sum_i alpha_ij dL/dy_i ; dL/dalpha_ij = dy_i . v_j
  Matrix dv = matmul_atb(weights_eff, upstream);
  Matrix dweights = matmul_abt(upstream, v);
  if (dropped) dweights = dropout_backward(*attn_drop, dweights);

  // Softmax Jacobian per row: ds_ij = a_ij (da_ij - sum_k a_ik da_ik).
  Matrix dscores(weights.rows(), weights.cols());
  for (int i = 0; i < weights.rows(); ++i) {
    const double* a = weights.row(i);
    const double* up = dweights.row(i);
    double inner = 0.0;
    for (int j = 0; j < weights.cols(); ++j) inner += a[j] * up[j];
    double* ds = dscores.row(i);
    for (int j = 0; j < weights.cols(); ++j) ds[j] = a[j] * (up[j] - inner);
  }
  if (!mask.is_none()) {
    for (int i = 0; i < dscores.rows(); ++i) {
      for (int j = 0; j < dscores.cols(); ++j) {
        if (!mask.allowed(i, j)) dscores(i, j) = 0.0;
      }
    }
  }
  if (scaled) {
    const double inv = 1.0 / std::sqrt(static_cast<double>(k.cols()));
    for (std::size_t i = 0; i < dscores.size(); ++i) dscores.data()[i] *= inv;
  }

  AttentionGrads grads;
  grads.dq = matmul(dscores, k);
  grads.dk = matmul_atb(dscores, q);
  grads.dv = std::move(dv);
  return grads;
}

}  // namespace

AttentionResult attention_forward_taped(const Matrix& q, const Matrix& k, const Matrix& v,
                                        const Mask& mask, bool scaled, AttentionTape& tape) {
  AttentionResult res = attention_batch(q, k, v, mask, scaled);
  tape.q = q;
  tape.k = k;
  tape.v = v;
  tape.weights = res.weights;
  tape.mask = mask;
  tape.scaled = scaled;
  return res;
}

AttentionGrads attention_backward(const AttentionTape& tape, const Matrix& upstream) {
  if (tape.q.rows() == 0 || tape.weights.rows() != tape.q.rows()) {
    throw std::invalid_argument("attention_backward: tape does not hold a forward pass");
  }
  return attention_core_backward(tape.q, tape.k, tape.v, tape.weights, tape.mask, tape.scaled,
                                 nullptr, upstream);
}

// ---------------------------------------------------------------------------
// Layer norm backward
// ---------------------------------------------------------------------------

LayerNormGrads layer_norm_backward(const LnTrace& trace, const Matrix& gamma,
                                   const Matrix& upstream) {
  if (!upstream.same_shape(trace.xhat)) {
    throw std::invalid_argument("layer_norm_backward: upstream " + shape_string(upstream) +
                                " vs recorded " + shape_string(trace.xhat));
  }
  if (gamma.rows() != 1 || gamma.cols() != trace.xhat.cols()) {
    throw std::invalid_argument("layer_norm_backward: gamma must be 1x" +
                                std::to_string(trace.xhat.cols()));
  }
  const int d = trace.xhat.cols();
  LayerNormGrads out;
  out.dx = Matrix(upstream.rows(), d);
  out.dgamma = Matrix(1, d);
  out.dbeta = Matrix(1, d);
  const double* g = gamma.row(0);
  for (int i = 0; i < upstream.rows(); ++i) {
    const double* u = upstream.row(i);
    const double* xh = trace.xhat.row(i);
    double* dg = out.dgamma.row(0);
    double* db = out.dbeta.row(0);
    double mean_gu = 0.0;
    double mean_gux = 0.0;
    for (int j = 0; j < d; ++j) {
      dg[j] += u[j] * xh[j];
      db[j] += u[j];
      const double gu = u[j] * g[j];
      mean_gu += gu;
      mean_gux += gu * xh[j];
    }
    mean_gu /= d;
    mean_gux /= d;
    const double inv_std = trace.inv_std[i];
    double* dx = out.dx.row(i);
    for (int j = 0; j < d; ++j) {
      dx[j] = inv_std * (u[j] * g[j] - mean_gu - xh[j] * mean_gux);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model backward
// ---------------------------------------------------------------------------

ModelParams zero_grads_like(const ModelParams& params) {
  ModelParams grads;
  for (const auto& [key, value] : params) grads.emplace(key, Matrix(value.rows(), value.cols()));
  return grads;
}

namespace {

const Matrix& param(const ModelParams& params, const std::string& key) {
  auto it = params.find(key);
  if (it == params.end()) throw std::invalid_argument("missing parameter: " + key);
  return it->second;
}

void acc(ModelParams& grads, const std::string& key, const Matrix& delta) {
  auto it = grads.find(key);
  if (it == grads.end()) throw std::invalid_argument("missing gradient slot: " + key);
  add_in_place(it->second, delta);
}

struct MhaInputGrads {
  Matrix dxq, dxk, dxv;
};

MhaInputGrads mha_backward(const MhaTrace& trace, const ModelParams& params,
                           const std::string& prefix, const Matrix& upstream,
                           ModelParams& grads) {
  const Matrix& wq = param(params, prefix + ".wq");
  const Matrix& wk = param(params, prefix + ".wk");
  const Matrix& wv = param(params, prefix + ".wv");
  const Matrix& wo = param(params, prefix + ".wo");
  const int h = static_cast<int>(trace.heads.size());

  acc(grads, prefix + ".wo", matmul_atb(trace.concat, upstream));
  const Matrix dconcat = matmul_abt(upstream, wo);
  const std::vector<Matrix> dheads = split_heads(dconcat, h);

  std::vector<Matrix> dq_heads, dk_heads, dv_heads;
  dq_heads.reserve(h);
  dk_heads.reserve(h);
  dv_heads.reserve(h);
  for (int head = 0; head < h; ++head) {
    const HeadTrace& ht = trace.heads[head];
    AttentionGrads g = attention_core_backward(ht.q, ht.k, ht.v, ht.weights, trace.mask,
                                               /*scaled=*/true, &ht.attn_drop, dheads[head]);
    dq_heads.push_back(std::move(g.dq));
    dk_heads.push_back(std::move(g.dk));
    dv_heads.push_back(std::move(g.dv));
  }
  const Matrix dqp = merge_heads(dq_heads);
  const Matrix dkp = merge_heads(dk_heads);
  const Matrix dvp = merge_heads(dv_heads);

  acc(grads, prefix + ".wq", matmul_atb(trace.xq, dqp));
  acc(grads, prefix + ".wk", matmul_atb(trace.xk, dkp));
  acc(grads, prefix + ".wv", matmul_atb(trace.xv, dvp));

  MhaInputGrads out;
  out.dxq = matmul_abt(dqp, wq);
  out.dxk = matmul_abt(dkp, wk);
  out.dxv = matmul_abt(dvp, wv);
  return out;
}

Matrix ffn_backward(const FfnTrace& trace, const ModelParams& params, const std::string& prefix,
                    ActivationKind kind, double swish_beta, const Matrix& upstream,
                    ModelParams& grads) {
  const Matrix& w1 = param(params, prefix + ".w1");
  const Matrix& w2 = param(params, prefix + ".w2");

  acc(grads, prefix + ".w2", matmul_atb(trace.act, upstream));
  acc(grads, prefix + ".b2", column_sums(upstream));
  Matrix dpre = matmul_abt(upstream, w2);
  for (std::size_t i = 0; i < dpre.size(); ++i) {
    dpre.data()[i] *= activation_derivative(kind, swish_beta, trace.pre.data()[i]);
  }
  acc(grads, prefix + ".w1", matmul_atb(trace.x, dpre));
  acc(grads, prefix + ".b1", column_sums(dpre));
  return matmul_abt(dpre, w1);
}

Matrix ln_backward_acc(const LnTrace& trace, const ModelParams& params,
                       const std::string& prefix, const Matrix& upstream, ModelParams& grads) {
  LayerNormGrads g = layer_norm_backward(trace, param(params, prefix + ".g"), upstream);
  acc(grads, prefix + ".g", g.dgamma);
  acc(grads, prefix + ".b", g.dbeta);
  return std::move(g.dx);
}

Matrix enc_layer_backward(const EncLayerTrace& trace, const Model& model, int layer,
                          const Matrix& dout, ModelParams& grads) {
  const ModelConfig& cfg = model.config;
  const std::string prefix = "enc." + std::to_string(layer);

  if (cfg.norm_placement == NormPlacement::kPostNorm) {
    Matrix dr2 = ln_backward_acc(trace.ln2, model.params, prefix + ".ln2", dout, grads);
    Matrix dy1 = dr2;
    const Matrix df = dropout_backward(trace.ffn_drop, dr2);
    add_in_place(dy1, ffn_backward(trace.ffn, model.params, prefix + ".ffn", cfg.activation,
                                   cfg.swish_beta, df, grads));
    Matrix dr1 = ln_backward_acc(trace.ln1, model.params, prefix + ".ln1", dy1, grads);
    Matrix dx = dr1;
    const Matrix da = dropout_backward(trace.attn_drop, dr1);
    MhaInputGrads g = mha_backward(trace.attn, model.params, prefix + ".attn", da, grads);
    add_in_place(dx, g.dxq);
    add_in_place(dx, g.dxk);
    add_in_place(dx, g.dxv);
    return dx;
  }

  Matrix dy1 = dout;
  const Matrix df = dropout_backward(trace.ffn_drop, dout);
  const Matrix dly = ffn_backward(trace.ffn, model.params, prefix + ".ffn", cfg.activation,
                                  cfg.swish_beta, df, grads);
  add_in_place(dy1, ln_backward_acc(trace.ln2, model.params, prefix + ".ln2", dly, grads));
  Matrix dx = dy1;
  const Matrix da = dropout_backward(trace.attn_drop, dy1);
  MhaInputGrads g = mha_backward(trace.attn, model.params, prefix + ".attn", da, grads);
  Matrix dlx = g.dxq;
  add_in_place(dlx, g.dxk);
  add_in_place(dlx, g.dxv);
  add_in_place(dx, ln_backward_acc(trace.ln1, model.params, prefix + ".ln1", dlx, grads));
  return dx;
}

Matrix dec_layer_backward(const DecLayerTrace& trace, const Model& model, int layer,
                          const Matrix& dout, ModelParams& grads, Matrix& dmemory) {
  const ModelConfig& cfg = model.config;
  const std::string prefix = "dec." + std::to_string(layer);

  if (cfg.norm_placement == NormPlacement::kPostNorm) {
    Matrix dr3 = ln_backward_acc(trace.ln3, model.params, prefix + ".ln3", dout, grads);
    Matrix dy2 = dr3;
    const Matrix df = dropout_backward(trace.ffn_drop, dr3);
    add_in_place(dy2, ffn_backward(trace.ffn, model.params, prefix + ".ffn", cfg.activation,
                                   cfg.swish_beta, df, grads));
    Matrix dr2 = ln_backward_acc(trace.ln2, model.params, prefix + ".ln2", dy2, grads);
    Matrix dy1 = dr2;
    const Matrix dc = dropout_backward(trace.cross_drop, dr2);
    MhaInputGrads cg = mha_backward(trace.cross_attn, model.params, prefix + ".cross", dc, grads);
    add_in_place(dy1, cg.dxq);
    add_in_place(dmemory, cg.dxk);
    add_in_place(dmemory, cg.dxv);
    Matrix dr1 = ln_backward_acc(trace.ln1, model.params, prefix + ".ln1", dy1, grads);
    Matrix dx = dr1;
    const Matrix da = dropout_backward(trace.self_drop, dr1);
    MhaInputGrads sg = mha_backward(trace.self_attn, model.params, prefix + ".self", da, grads);
    add_in_place(dx, sg.dxq);
    add_in_place(dx, sg.dxk);
    add_in_place(dx, sg.dxv);
    return dx;
  }

  Matrix dy2 = dout;
  const Matrix df = dropout_backward(trace.ffn_drop, dout);
  const Matrix dly2 = ffn_backward(trace.ffn, model.params, prefix + ".ffn", cfg.activation,
                                   cfg.swish_beta, df, grads);
  add_in_place(dy2, ln_backward_acc(trace.ln3, model.params, prefix + ".ln3", dly2, grads));
  Matrix dy1 = dy2;
  const Matrix dc = dropout_backward(trace.cross_drop, dy2);
  MhaInputGrads cg = mha_backward(trace.cross_attn, model.params, prefix + ".cross", dc, grads);
  add_in_place(dmemory, cg.dxk);
  add_in_place(dmemory, cg.dxv);
  add_in_place(dy1, ln_backward_acc(trace.ln2, model.params, prefix + ".ln2", cg.dxq, grads));
  Matrix dx = dy1;
  const Matrix da = dropout_backward(trace.self_drop, dy1);
  MhaInputGrads sg = mha_backward(trace.self_attn, model.params, prefix + ".self", da, grads);
  Matrix dlx = sg.dxq;
  add_in_place(dlx, sg.dxk);
  add_in_place(dlx, sg.dxv);
  add_in_place(dx, ln_backward_acc(trace.ln1, model.params, prefix + ".ln1", dlx, grads));
  return dx;
}

void embed_backward(const EmbedTrace& trace, const Model& model, const Matrix& dout,
                    ModelParams& grads) {
  const Matrix dx = dropout_backward(trace.drop, dout);
  const double mult = model.config.embed_multiplier();
  Matrix& dtok = grads.at("embed.tok");
  for (int i = 0; i < dx.rows(); ++i) {
    const double* src = dx.row(i);
    double* dst = dtok.row(trace.tokens[i]);
    for (int j = 0; j < dx.cols(); ++j) dst[j] += mult * src[j];
  }
  if (model.config.pe_mode == PeMode::kLearned) {
    Matrix& dpos = grads.at("embed.pos");
    for (int i = 0; i < dx.rows(); ++i) {
      const double* src = dx.row(i);
      double* dst = dpos.row(i);
      for (int j = 0; j < dx.cols(); ++j) dst[j] += src[j];
    }
  }
}

void check_tape(const GradTape& tape, bool needs_decoder) {
  if (tape.owner == nullptr || !tape.has_encoder) {
    throw std::invalid_argument("backward: tape does not belong to a recorded forward pass");
  }
  if (needs_decoder && !tape.has_decoder) {
    throw std::invalid_argument("backward: tape holds no decoder forward");
  }
}

}  // namespace

void model_backward(const GradTape& tape, const Matrix& dlogits, ModelParams& grads) {
  check_tape(tape, /*needs_decoder=*/true);
  const Model& model = *tape.owner;
  if (grads.empty()) grads = zero_grads_like(model.params);
  if (dlogits.rows() != tape.dec_out.rows() || dlogits.cols() != model.config.vocab_size) {
    throw std::invalid_argument("model_backward: upstream " + shape_string(dlogits) +
                                " does not match logits " +
                                std::to_string(tape.dec_out.rows()) + "x" +
                                std::to_string(model.config.vocab_size));
  }

  acc(grads, "out.w", matmul_atb(tape.dec_out, dlogits));
  Matrix d = matmul_abt(dlogits, param(model.params, "out.w"));
  if (model.config.norm_placement == NormPlacement::kPreNorm) {
    d = ln_backward_acc(tape.final_ln, model.params, "final_ln", d, grads);
  }

  Matrix dmemory(tape.memory.rows(), tape.memory.cols());
  for (int l = static_cast<int>(tape.dec_layers.size()) - 1; l >= 0; --l) {
    d = dec_layer_backward(tape.dec_layers[l], model, l, d, grads, dmemory);
  }
  embed_backward(tape.tgt_embed, model, d, grads);

  for (int l = static_cast<int>(tape.enc_layers.size()) - 1; l >= 0; --l) {
    dmemory = enc_layer_backward(tape.enc_layers[l], model, l, dmemory, grads);
  }
  embed_backward(tape.src_embed, model, dmemory, grads);
}

void encode_backward(const GradTape& tape, const Matrix& dmemory, ModelParams& grads) {
  check_tape(tape, /*needs_decoder=*/false);
  const Model& model = *tape.owner;
  if (grads.empty()) grads = zero_grads_like(model.params);
  if (!dmemory.same_shape(tape.memory)) {
    throw std::invalid_argument("encode_backward: upstream " + shape_string(dmemory) +
                                " does not match encoder output " + shape_string(tape.memory));
  }
  Matrix d = dmemory;
  for (int l = static_cast<int>(tape.enc_layers.size()) - 1; l >= 0; --l) {
    d = enc_layer_backward(tape.enc_layers[l], model, l, d, grads);
  }
  embed_backward(tape.src_embed, model, d, grads);
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

double finite_diff_check(const std::function<double(std::span<const double>)>& f,
                         std::span<const double> point, std::span<const double> analytic,
                         double h) {
  if (h <= 0.0) throw std::invalid_argument("finite_diff_check: h must be positive");
  if (point.size() != analytic.size()) {
    throw std::invalid_argument("finite_diff_check: gradient length mismatch");
  }
  std::vector<double> x(point.begin(), point.end());
  double max_rel = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double fp = f(x);
    x[i] = saved - h;
    const double fm = f(x);
    x[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw std::runtime_error("finite_diff_check: non-finite function value at coordinate " +
                               std::to_string(i));
    }
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    max_rel = std::max(max_rel, std::abs(numeric - analytic[i]) / denom);
  }
  return max_rel;
}

}  // namespace attnkit
