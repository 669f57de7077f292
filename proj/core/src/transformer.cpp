#include "attnkit/transformer.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "attnkit/autograd.hpp"
#include "attnkit/dropout.hpp"

namespace attnkit {

void ModelConfig::validate() const {
  if (vocab_size < 4) {
    throw std::invalid_argument("config: vocab_size must be >= 4 (PAD/BOS/EOS + payload)");
  }
  if (d_model < 1 || h < 1 || d_model % h != 0) {
    throw std::invalid_argument("config: d_model=" + std::to_string(d_model) +
                                " must be positive and divisible by h=" + std::to_string(h));
  }
  if (d_ff < 1) throw std::invalid_argument("config: d_ff must be >= 1");
  if (n_layers < 1) throw std::invalid_argument("config: n_layers must be >= 1");
  if (max_len < 1) throw std::invalid_argument("config: max_len must be >= 1");
  if (dropout_p < 0.0 || dropout_p >= 1.0 || attn_dropout_p < 0.0 || attn_dropout_p >= 1.0) {
    throw std::invalid_argument("config: dropout probabilities must be in [0, 1)");
  }
  if (ln_eps <= 0.0) throw std::invalid_argument("config: ln_eps must be positive");
  if (pe_mode == PeMode::kSinusoidal && d_model % 2 != 0) {
    throw std::invalid_argument("config: sinusoidal PE requires even d_model");
  }
}

double ModelConfig::embed_multiplier() const {
  return embed_scale == EmbedScale::kSqrtD ? std::sqrt(static_cast<double>(d_model)) : 1.0;
}

// ---------------------------------------------------------------------------
// Parameter tree
// ---------------------------------------------------------------------------

namespace {

const Matrix& param(const ModelParams& params, const std::string& key) {
  auto it = params.find(key);
  if (it == params.end()) throw std::invalid_argument("missing parameter: " + key);
  return it->second;
}

}  // namespace

std::map<std::string, std::pair<int, int>> param_shapes(const ModelConfig& config) {
  config.validate();
  std::map<std::string, std::pair<int, int>> shapes;
  const int d = config.d_model;
  auto put = [&](const std::string& key, int rows, int cols) {
    shapes.emplace(key, std::make_pair(rows, cols));
  };
  auto ln_pair = [&](const std::string& prefix) {
    put(prefix + ".g", 1, d);
    put(prefix + ".b", 1, d);
  };
  auto attn_block = [&](const std::string& prefix) {
    for (const char* w : {".wq", ".wk", ".wv", ".wo"}) put(prefix + w, d, d);
  };
  auto ffn_block = [&](const std::string& prefix) {
    put(prefix + ".w1", d, config.d_ff);
    put(prefix + ".b1", 1, config.d_ff);
    put(prefix + ".w2", config.d_ff, d);
    put(prefix + ".b2", 1, d);
  };

  put("embed.tok", config.vocab_size, d);
  if (config.pe_mode == PeMode::kLearned) put("embed.pos", config.max_len, d);
  for (int i = 0; i < config.n_layers; ++i) {
    const std::string prefix = "enc." + std::to_string(i);
    attn_block(prefix + ".attn");
    ln_pair(prefix + ".ln1");
    ffn_block(prefix + ".ffn");
    ln_pair(prefix + ".ln2");
  }
  for (int i = 0; i < config.n_layers; ++i) {
    const std::string prefix = "dec." + std::to_string(i);
    attn_block(prefix + ".self");
    ln_pair(prefix + ".ln1");
    attn_block(prefix + ".cross");
    ln_pair(prefix + ".ln2");
    ffn_block(prefix + ".ffn");
    ln_pair(prefix + ".ln3");
  }
  if (config.norm_placement == NormPlacement::kPreNorm) ln_pair("final_ln");
  put("out.w", d, config.vocab_size);
  return shapes;
}

ModelParams init_params(const ModelConfig& config, Rng& rng) {
  ModelParams p;
  const double embed_std = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  for (const auto& [key, shape] : param_shapes(config)) {
    const auto [rows, cols] = shape;
    if (key.ends_with(".g")) {
      Matrix m(rows, cols);
      for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = 1.0;
      p.emplace(key, std::move(m));
    } else if (key.ends_with(".b") || key.ends_with(".b1") || key.ends_with(".b2")) {
      p.emplace(key, Matrix(rows, cols));
    } else if (key.starts_with("embed.")) {
      p.emplace(key, gaussian_fill(rng, rows, cols, 0.0, embed_std));
    } else {
      p.emplace(key, gaussian_fill(rng, rows, cols, 0.0,
                                   1.0 / std::sqrt(static_cast<double>(rows))));
    }
  }
  return p;
}

void validate_params(const ModelConfig& config, const ModelParams& params) {
  const auto shapes = param_shapes(config);
  if (shapes.size() != params.size()) {
    throw std::invalid_argument("params hold " + std::to_string(params.size()) +
                                " entries, config expects " + std::to_string(shapes.size()));
  }
  for (const auto& [key, shape] : shapes) {
    const auto it = params.find(key);
    if (it == params.end()) throw std::invalid_argument("params missing key '" + key + "'");
    if (it->second.rows() != shape.first || it->second.cols() != shape.second) {
      throw std::invalid_argument("param '" + key + "' is " + shape_string(it->second) +
                                  ", expected " + std::to_string(shape.first) + "x" +
                                  std::to_string(shape.second));
    }
    if (!it->second.all_finite()) {
      throw std::invalid_argument("param '" + key + "' holds non-finite values");
    }
  }
}

// ---------------------------------------------------------------------------
// Positional encoding
// ---------------------------------------------------------------------------

Matrix sinusoidal_pe(int n, int d_model) {
  if (n < 1) throw std::invalid_argument("sinusoidal_pe: n must be >= 1");
  if (d_model < 2 || d_model % 2 != 0) {
    throw std::invalid_argument("sinusoidal_pe: d_model must be even, got " +
                                std::to_string(d_model));
  }
  Matrix pe(n, d_model);
  for (int pos = 0; pos < n; ++pos) {
    double* row = pe.row(pos);
    for (int i = 0; i < d_model / 2; ++i) {
      const double omega = std::pow(10000.0, -2.0 * i / d_model);
      const double arg = pos * omega;
      row[2 * i] = std::sin(arg);
      row[2 * i + 1] = std::cos(arg);
    }
  }
  return pe;
}

namespace {

// Rows of the sinusoidal table depend only on (pos, d_model), so a grown
// cache returns the same values as a fresh computation.
const Matrix& pe_cached(int n, int d_model) {
  thread_local Matrix cache;
  if (cache.cols() != d_model || cache.rows() < n) {
    cache = sinusoidal_pe(std::max(n, std::max(cache.rows(), 64)), d_model);
  }
  return cache;
}

}  // namespace

// ---------------------------------------------------------------------------
// Layer norm
// ---------------------------------------------------------------------------

std::vector<double> layer_norm(std::span<const double> x, std::span<const double> gamma,
                               std::span<const double> beta, double eps) {
  if (x.size() != gamma.size() || x.size() != beta.size()) {
    throw std::invalid_argument("layer_norm: length mismatch");
  }
  if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be positive");
  const std::size_t d = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(d);
  const double inv_std = 1.0 / std::sqrt(var + eps);
  std::vector<double> out(d);
  for (std::size_t i = 0; i < d; ++i) out[i] = gamma[i] * (x[i] - mean) * inv_std + beta[i];
  return out;
}

namespace {

void check_ln_shapes(const Matrix& x, const Matrix& gamma, const Matrix& beta) {
  if (gamma.rows() != 1 || beta.rows() != 1 || gamma.cols() != x.cols() ||
      beta.cols() != x.cols()) {
    throw std::invalid_argument("layer_norm_rows: gamma/beta must be 1x" +
                                std::to_string(x.cols()));
  }
}

}  // namespace

Matrix layer_norm_rows_traced(const Matrix& x, const Matrix& gamma, const Matrix& beta,
                              double eps, LnTrace& trace) {
  check_ln_shapes(x, gamma, beta);
  if (eps <= 0.0) throw std::invalid_argument("layer_norm_rows: eps must be positive");
  const int d = x.cols();
  Matrix out(x.rows(), d);
  trace.xhat = Matrix(x.rows(), d);
  trace.inv_std.assign(x.rows(), 0.0);
  const double* g = gamma.row(0);
  const double* b = beta.row(0);
  for (int i = 0; i < x.rows(); ++i) {
    const double* xi = x.row(i);
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += xi[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= d;
    const double inv_std = 1.0 / std::sqrt(var + eps);
    trace.inv_std[i] = inv_std;
    double* xh = trace.xhat.row(i);
    double* oi = out.row(i);
    for (int j = 0; j < d; ++j) {
      xh[j] = (xi[j] - mean) * inv_std;
      oi[j] = g[j] * xh[j] + b[j];
    }
  }
  return out;
}

Matrix layer_norm_rows(const Matrix& x, const Matrix& gamma, const Matrix& beta, double eps) {
  LnTrace trace;
  return layer_norm_rows_traced(x, gamma, beta, eps, trace);
}

// ---------------------------------------------------------------------------
// Activations and FFN
// ---------------------------------------------------------------------------

double activation_value(ActivationKind kind, double swish_beta, double x) {
  switch (kind) {
    case ActivationKind::kRelu:
      return x > 0.0 ? x : 0.0;
    case ActivationKind::kGelu:
      return x * 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    case ActivationKind::kSwish:
      return x / (1.0 + std::exp(-swish_beta * x));
  }
  return 0.0;
}

double activation_derivative(ActivationKind kind, double swish_beta, double x) {
  switch (kind) {
    case ActivationKind::kRelu:
      return x > 0.0 ? 1.0 : 0.0;
    case ActivationKind::kGelu: {
      const double phi = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
      const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
      return phi + x * pdf;
    }
    case ActivationKind::kSwish: {
      const double s = 1.0 / (1.0 + std::exp(-swish_beta * x));
      return s + swish_beta * x * s * (1.0 - s);
    }
  }
  return 0.0;
}

namespace {

Matrix ffn_rows_impl(const Matrix& x, const Matrix& w1, const Matrix& b1, const Matrix& w2,
                     const Matrix& b2, ActivationKind kind, double swish_beta, FfnTrace* trace) {
  Matrix pre = add_row_broadcast(matmul(x, w1), b1);
  Matrix act(pre.rows(), pre.cols());
  for (std::size_t i = 0; i < pre.size(); ++i) {
    act.data()[i] = activation_value(kind, swish_beta, pre.data()[i]);
  }
  Matrix out = add_row_broadcast(matmul(act, w2), b2);
  if (trace) {
    trace->x = x;
    trace->pre = std::move(pre);
    trace->act = std::move(act);
  }
  return out;
}

}  // namespace

Matrix ffn_rows(const Matrix& x, const Matrix& w1, const Matrix& b1, const Matrix& w2,
                const Matrix& b2, ActivationKind activation, double swish_beta) {
  return ffn_rows_impl(x, w1, b1, w2, b2, activation, swish_beta, nullptr);
}

std::vector<double> ffn_forward(std::span<const double> x, const Matrix& w1, const Matrix& b1,
                                const Matrix& w2, const Matrix& b2, ActivationKind activation,
                                double swish_beta) {
  const Matrix out =
      ffn_rows(Matrix::from_row(x), w1, b1, w2, b2, activation, swish_beta);
  return std::vector<double>(out.row(0), out.row(0) + out.cols());
}

// ---------------------------------------------------------------------------
// Sub-layer wrapper
// ---------------------------------------------------------------------------

Matrix sublayer(const Matrix& x, const std::function<Matrix(const Matrix&)>& f,
                NormPlacement placement, const Matrix& gamma, const Matrix& beta, double eps,
                double dropout_p, Rng& rng, bool train_mode) {
  check_ln_shapes(x, gamma, beta);
  auto apply = [&](const Matrix& input) {
    Matrix y = f(input);
    if (!y.same_shape(x)) {
      throw std::invalid_argument("sublayer: f changed shape from " + shape_string(x) + " to " +
                                  shape_string(y));
    }
    return dropout_apply(y, dropout_p, rng, train_mode).output;
  };
  if (placement == NormPlacement::kPostNorm) {
    return layer_norm_rows(add(x, apply(x)), gamma, beta, eps);
  }
  return add(x, apply(layer_norm_rows(x, gamma, beta, eps)));
}

// ---------------------------------------------------------------------------
// Model forward
// ---------------------------------------------------------------------------

namespace {

Matrix dropout_traced(const Matrix& x, double p, Rng& rng, bool train_mode,
                      DropoutTrace* trace) {
  DropoutResult r = dropout_apply(x, p, rng, train_mode);
  if (trace) {
    trace->p = p;
    trace->active = train_mode && p > 0.0;
    trace->mask = trace->active ? std::move(r.mask) : Matrix();
  }
  return std::move(r.output);
}

// Multi-head attention block over explicit weight matrices, with optional
// trace recording and optional per-head weight export.
Matrix mha_block(const Matrix& xq, const Matrix& xk, const Matrix& xv, const Matrix& wq,
                 const Matrix& wk, const Matrix& wv, const Matrix& wo, int h, const Mask& mask,
                 double attn_dropout_p, Rng& rng, bool train_mode, MhaTrace* trace,
                 std::vector<Matrix>* weights_out) {
  std::vector<Matrix> qh = split_heads(matmul(xq, wq), h);
  std::vector<Matrix> kh = split_heads(matmul(xk, wk), h);
  std::vector<Matrix> vh = split_heads(matmul(xv, wv), h);

  if (trace) {
    trace->xq = xq;
    trace->xk = xk;
    trace->xv = xv;
    trace->mask = mask;
    trace->heads.assign(h, HeadTrace{});
  }

  std::vector<Matrix> outputs;
  outputs.reserve(h);
  for (int head = 0; head < h; ++head) {
    const Matrix scores = masked_scores(qh[head], kh[head], mask, /*scaled=*/true);
    Matrix weights = stable_softmax_rows(scores);
    DropoutTrace drop;
    const Matrix dropped = dropout_traced(weights, attn_dropout_p, rng, train_mode,
                                          trace ? &drop : nullptr);
    outputs.push_back(matmul(dropped, vh[head]));
    if (weights_out) weights_out->push_back(weights);
    if (trace) {
      HeadTrace& ht = trace->heads[head];
      ht.q = std::move(qh[head]);
      ht.k = std::move(kh[head]);
      ht.v = std::move(vh[head]);
      ht.weights = std::move(weights);
      ht.attn_drop = std::move(drop);
    }
  }
  Matrix concat = merge_heads(outputs);
  Matrix y = matmul(concat, wo);
  if (trace) trace->concat = std::move(concat);
  return y;
}

Matrix embed_forward(const Model& model, std::span<const int> tokens, Rng& rng, bool train_mode,
                     EmbedTrace* trace) {
  const ModelConfig& cfg = model.config;
  if (tokens.empty()) throw std::invalid_argument("embed: empty token sequence");
  const int n = static_cast<int>(tokens.size());
  if (cfg.pe_mode == PeMode::kLearned && n > cfg.max_len) {
    throw std::invalid_argument("embed: sequence length " + std::to_string(n) +
                                " exceeds max_len " + std::to_string(cfg.max_len) +
                                " under learned positional encoding");
  }
  const Matrix& tok = param(model.params, "embed.tok");
  const double mult = cfg.embed_multiplier();
  Matrix x(n, cfg.d_model);
  for (int i = 0; i < n; ++i) {
    const int t = tokens[i];
    if (t < 0 || t >= cfg.vocab_size) {
      throw std::out_of_range("embed: token " + std::to_string(t) + " outside vocab of " +
                              std::to_string(cfg.vocab_size));
    }
    const double* e = tok.row(t);
    double* xi = x.row(i);
    for (int j = 0; j < cfg.d_model; ++j) xi[j] = mult * e[j];
  }
  if (cfg.pe_mode == PeMode::kLearned) {
    const Matrix& pos = param(model.params, "embed.pos");
    for (int i = 0; i < n; ++i) {
      const double* pr = pos.row(i);
      double* xi = x.row(i);
      for (int j = 0; j < cfg.d_model; ++j) xi[j] += pr[j];
    }
  } else {
    const Matrix& pe = pe_cached(n, cfg.d_model);
    for (int i = 0; i < n; ++i) {
      const double* pr = pe.row(i);
      double* xi = x.row(i);
      for (int j = 0; j < cfg.d_model; ++j) xi[j] += pr[j];
    }
  }
  if (trace) trace->tokens.assign(tokens.begin(), tokens.end());
  return dropout_traced(x, cfg.dropout_p, rng, train_mode, trace ? &trace->drop : nullptr);
}

Matrix enc_layer_forward(const Model& model, int layer, const Matrix& x, Rng& rng,
                         bool train_mode, EncLayerTrace* trace,
                         std::vector<Matrix>* weights_out) {
  const ModelConfig& cfg = model.config;
  const std::string prefix = "enc." + std::to_string(layer);
  const Matrix& wq = param(model.params, prefix + ".attn.wq");
  const Matrix& wk = param(model.params, prefix + ".attn.wk");
  const Matrix& wv = param(model.params, prefix + ".attn.wv");
  const Matrix& wo = param(model.params, prefix + ".attn.wo");
  const Matrix& g1 = param(model.params, prefix + ".ln1.g");
  const Matrix& b1 = param(model.params, prefix + ".ln1.b");
  const Matrix& g2 = param(model.params, prefix + ".ln2.g");
  const Matrix& b2 = param(model.params, prefix + ".ln2.b");
  const Matrix& fw1 = param(model.params, prefix + ".ffn.w1");
  const Matrix& fb1 = param(model.params, prefix + ".ffn.b1");
  const Matrix& fw2 = param(model.params, prefix + ".ffn.w2");
  const Matrix& fb2 = param(model.params, prefix + ".ffn.b2");

  LnTrace ln_scratch;
  if (cfg.norm_placement == NormPlacement::kPostNorm) {
    Matrix a = mha_block(x, x, x, wq, wk, wv, wo, cfg.h, Mask::none(), cfg.attn_dropout_p, rng,
                         train_mode, trace ? &trace->attn : nullptr, weights_out);
    Matrix ad = dropout_traced(a, cfg.dropout_p, rng, train_mode,
                               trace ? &trace->attn_drop : nullptr);
    Matrix y1 = layer_norm_rows_traced(add(x, ad), g1, b1, cfg.ln_eps,
                                       trace ? trace->ln1 : ln_scratch);
    Matrix f = ffn_rows_impl(y1, fw1, fb1, fw2, fb2, cfg.activation, cfg.swish_beta,
                             trace ? &trace->ffn : nullptr);
    Matrix fd = dropout_traced(f, cfg.dropout_p, rng, train_mode,
                               trace ? &trace->ffn_drop : nullptr);
    return layer_norm_rows_traced(add(y1, fd), g2, b2, cfg.ln_eps,
                                  trace ? trace->ln2 : ln_scratch);
  }

  Matrix lx = layer_norm_rows_traced(x, g1, b1, cfg.ln_eps, trace ? trace->ln1 : ln_scratch);
  Matrix a = mha_block(lx, lx, lx, wq, wk, wv, wo, cfg.h, Mask::none(), cfg.attn_dropout_p, rng,
                       train_mode, trace ? &trace->attn : nullptr, weights_out);
  Matrix y1 = add(x, dropout_traced(a, cfg.dropout_p, rng, train_mode,
                                    trace ? &trace->attn_drop : nullptr));
  Matrix ly = layer_norm_rows_traced(y1, g2, b2, cfg.ln_eps, trace ? trace->ln2 : ln_scratch);
  Matrix f = ffn_rows_impl(ly, fw1, fb1, fw2, fb2, cfg.activation, cfg.swish_beta,
                           trace ? &trace->ffn : nullptr);
  return add(y1, dropout_traced(f, cfg.dropout_p, rng, train_mode,
                                trace ? &trace->ffn_drop : nullptr));
}

Matrix dec_layer_forward(const Model& model, int layer, const Matrix& x, const Matrix& memory,
                         Rng& rng, bool train_mode, DecLayerTrace* trace) {
  const ModelConfig& cfg = model.config;
  const std::string prefix = "dec." + std::to_string(layer);
  auto p = [&](const char* suffix) -> const Matrix& {
    return param(model.params, prefix + suffix);
  };

  LnTrace ln_scratch;
  if (cfg.norm_placement == NormPlacement::kPostNorm) {
    Matrix a = mha_block(x, x, x, p(".self.wq"), p(".self.wk"), p(".self.wv"), p(".self.wo"),
                         cfg.h, Mask::causal(), cfg.attn_dropout_p, rng, train_mode,
                         trace ? &trace->self_attn : nullptr, nullptr);
    Matrix y1 = layer_norm_rows_traced(
        add(x, dropout_traced(a, cfg.dropout_p, rng, train_mode,
                              trace ? &trace->self_drop : nullptr)),
        p(".ln1.g"), p(".ln1.b"), cfg.ln_eps, trace ? trace->ln1 : ln_scratch);
    Matrix c = mha_block(y1, memory, memory, p(".cross.wq"), p(".cross.wk"), p(".cross.wv"),
                         p(".cross.wo"), cfg.h, Mask::none(), cfg.attn_dropout_p, rng,
                         train_mode, trace ? &trace->cross_attn : nullptr, nullptr);
    Matrix y2 = layer_norm_rows_traced(
        add(y1, dropout_traced(c, cfg.dropout_p, rng, train_mode,
                               trace ? &trace->cross_drop : nullptr)),
        p(".ln2.g"), p(".ln2.b"), cfg.ln_eps, trace ? trace->ln2 : ln_scratch);
    Matrix f = ffn_rows_impl(y2, p(".ffn.w1"), p(".ffn.b1"), p(".ffn.w2"), p(".ffn.b2"),
                             cfg.activation, cfg.swish_beta, trace ? &trace->ffn : nullptr);
    return layer_norm_rows_traced(
        add(y2, dropout_traced(f, cfg.dropout_p, rng, train_mode,
                               trace ? &trace->ffn_drop : nullptr)),
        p(".ln3.g"), p(".ln3.b"), cfg.ln_eps, trace ? trace->ln3 : ln_scratch);
  }

  Matrix lx = layer_norm_rows_traced(x, p(".ln1.g"), p(".ln1.b"), cfg.ln_eps,
                                     trace ? trace->ln1 : ln_scratch);
  Matrix a = mha_block(lx, lx, lx, p(".self.wq"), p(".self.wk"), p(".self.wv"), p(".self.wo"),
                       cfg.h, Mask::causal(), cfg.attn_dropout_p, rng, train_mode,
                       trace ? &trace->self_attn : nullptr, nullptr);
  Matrix y1 = add(x, dropout_traced(a, cfg.dropout_p, rng, train_mode,
                                    trace ? &trace->self_drop : nullptr));
  Matrix ly1 = layer_norm_rows_traced(y1, p(".ln2.g"), p(".ln2.b"), cfg.ln_eps,
                                      trace ? trace->ln2 : ln_scratch);
  Matrix c = mha_block(ly1, memory, memory, p(".cross.wq"), p(".cross.wk"), p(".cross.wv"),
                       p(".cross.wo"), cfg.h, Mask::none(), cfg.attn_dropout_p, rng, train_mode,
                       trace ? &trace->cross_attn : nullptr, nullptr);
  Matrix y2 = add(y1, dropout_traced(c, cfg.dropout_p, rng, train_mode,
                                     trace ? &trace->cross_drop : nullptr));
  Matrix ly2 = layer_norm_rows_traced(y2, p(".ln3.g"), p(".ln3.b"), cfg.ln_eps,
                                      trace ? trace->ln3 : ln_scratch);
  Matrix f = ffn_rows_impl(ly2, p(".ffn.w1"), p(".ffn.b1"), p(".ffn.w2"), p(".ffn.b2"),
                           cfg.activation, cfg.swish_beta, trace ? &trace->ffn : nullptr);
  return add(y2, dropout_traced(f, cfg.dropout_p, rng, train_mode,
                                trace ? &trace->ffn_drop : nullptr));
}

Matrix encode_impl(const Model& model, std::span<const int> tokens, Rng& rng, bool train_mode,
                   GradTape* tape, std::vector<std::vector<Matrix>>* weights_out) {
  model.config.validate();
  Matrix x = embed_forward(model, tokens, rng, train_mode, tape ? &tape->src_embed : nullptr);
  if (tape) tape->enc_layers.assign(model.config.n_layers, EncLayerTrace{});
  if (weights_out) weights_out->assign(model.config.n_layers, {});
  for (int l = 0; l < model.config.n_layers; ++l) {
    x = enc_layer_forward(model, l, x, rng, train_mode, tape ? &tape->enc_layers[l] : nullptr,
                          weights_out ? &(*weights_out)[l] : nullptr);
  }
  return x;
}

Matrix decode_impl(const Model& model, std::span<const int> tgt_tokens, const Matrix& memory,
                   Rng& rng, bool train_mode, GradTape* tape) {
  if (memory.cols() != model.config.d_model) {
    throw std::invalid_argument("decode: memory width " + shape_string(memory) +
                                " must equal d_model=" + std::to_string(model.config.d_model));
  }
  Matrix y = embed_forward(model, tgt_tokens, rng, train_mode,
                           tape ? &tape->tgt_embed : nullptr);
  if (tape) tape->dec_layers.assign(model.config.n_layers, DecLayerTrace{});
  for (int l = 0; l < model.config.n_layers; ++l) {
    y = dec_layer_forward(model, l, y, memory, rng, train_mode,
                          tape ? &tape->dec_layers[l] : nullptr);
  }
  if (model.config.norm_placement == NormPlacement::kPreNorm) {
    LnTrace scratch;
    y = layer_norm_rows_traced(y, param(model.params, "final_ln.g"),
                               param(model.params, "final_ln.b"), model.config.ln_eps,
                               tape ? tape->final_ln : scratch);
  }
  if (tape) tape->dec_out = y;
  return matmul(y, param(model.params, "out.w"));
}

}  // namespace

Matrix encode(const Model& model, std::span<const int> src_tokens, Rng& rng, bool train_mode) {
  return encode_impl(model, src_tokens, rng, train_mode, nullptr, nullptr);
}

Matrix decode(const Model& model, std::span<const int> tgt_tokens, const Matrix& memory,
              Rng& rng, bool train_mode) {
  return decode_impl(model, tgt_tokens, memory, rng, train_mode, nullptr);
}

Matrix encode_traced(const Model& model, std::span<const int> src_tokens, Rng& rng,
                     bool train_mode, GradTape& tape) {
  tape = GradTape{};
  Matrix memory = encode_impl(model, src_tokens, rng, train_mode, &tape, nullptr);
  tape.memory = memory;
  tape.owner = &model;
  tape.has_encoder = true;
  return memory;
}

Matrix model_forward_traced(const Model& model, std::span<const int> src_tokens,
                            std::span<const int> tgt_tokens, Rng& rng, bool train_mode,
                            GradTape& tape) {
  tape = GradTape{};
  tape.memory = encode_impl(model, src_tokens, rng, train_mode, &tape, nullptr);
  Matrix logits = decode_impl(model, tgt_tokens, tape.memory, rng, train_mode, &tape);
  tape.owner = &model;
  tape.has_encoder = true;
  tape.has_decoder = true;
  return logits;
}

std::vector<int> greedy_generate(const Model& model, std::span<const int> src_tokens,
                                 int max_steps) {
  if (max_steps < 1) throw std::invalid_argument("greedy_generate: max_steps must be >= 1");
  Rng rng(0);  // eval mode draws nothing
  const Matrix memory = encode(model, src_tokens, rng, /*train_mode=*/false);
  std::vector<int> dec = {kBosToken};
  std::vector<int> out;
  for (int step = 0; step < max_steps; ++step) {
    const Matrix logits = decode(model, dec, memory, rng, /*train_mode=*/false);
    const double* last = logits.row(logits.rows() - 1);
    int best = 0;
    for (int v = 1; v < logits.cols(); ++v) {
      if (last[v] > last[best]) best = v;
    }
    if (best == kEosToken) break;
    out.push_back(best);
    dec.push_back(best);
  }
  return out;
}

EncoderActivations encode_with_attention(const Model& model, std::span<const int> src_tokens) {
  Rng rng(0);
  std::vector<std::vector<Matrix>> weights;
  EncoderActivations acts;
  acts.output = encode_impl(model, src_tokens, rng, /*train_mode=*/false, nullptr, &weights);
  acts.layers.reserve(weights.size());
  for (auto& layer : weights) {
    MhaResult r;
    r.head_weights = std::move(layer);
    acts.layers.push_back(std::move(r));
  }
  return acts;
}

}  // namespace attnkit
