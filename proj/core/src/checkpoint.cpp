#include "attnkit/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace attnkit {

std::string norm_placement_name(NormPlacement p) {
  return p == NormPlacement::kPostNorm ? "post" : "pre";
}
std::string activation_name(ActivationKind k) {
  switch (k) {
    case ActivationKind::kRelu: return "relu";
    case ActivationKind::kGelu: return "gelu";
    case ActivationKind::kSwish: return "swish";
  }
  return "relu";
}
std::string pe_mode_name(PeMode m) { return m == PeMode::kSinusoidal ? "sinusoidal" : "learned"; }
std::string embed_scale_name(EmbedScale s) { return s == EmbedScale::kOne ? "one" : "sqrt_d"; }

NormPlacement parse_norm_placement(const std::string& s) {
  if (s == "post") return NormPlacement::kPostNorm;
  if (s == "pre") return NormPlacement::kPreNorm;
  throw std::invalid_argument("unknown norm_placement '" + s + "' (post|pre)");
}
ActivationKind parse_activation(const std::string& s) {
  if (s == "relu") return ActivationKind::kRelu;
  if (s == "gelu") return ActivationKind::kGelu;
  if (s == "swish") return ActivationKind::kSwish;
  throw std::invalid_argument("unknown activation '" + s + "' (relu|gelu|swish)");
}
PeMode parse_pe_mode(const std::string& s) {
  if (s == "sinusoidal") return PeMode::kSinusoidal;
  if (s == "learned") return PeMode::kLearned;
  throw std::invalid_argument("unknown pe_mode '" + s + "' (sinusoidal|learned)");
}
EmbedScale parse_embed_scale(const std::string& s) {
  if (s == "one") return EmbedScale::kOne;
  if (s == "sqrt_d") return EmbedScale::kSqrtD;
  throw std::invalid_argument("unknown embed_scale '" + s + "' (one|sqrt_d)");
}

namespace {

constexpr char kMagic[4] = {'A', 'T', 'N', 'F'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 8);
}

void write_f64(std::ostream& out, double v) { write_u64(out, std::bit_cast<std::uint64_t>(v)); }

void write_str(std::ostream& out, const std::string& s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t read_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

double read_f64(std::istream& in) { return std::bit_cast<double>(read_u64(in)); }

std::string read_str(std::istream& in) {
  const std::uint32_t len = read_u32(in);
  std::string s(len, '\0');
  in.read(s.data(), len);
  if (!in) throw std::runtime_error("checkpoint: truncated string");
  return s;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::pair<std::string, std::string>> config_entries(const ModelConfig& c) {
  return {
      {"vocab_size", std::to_string(c.vocab_size)},
      {"d_model", std::to_string(c.d_model)},
      {"h", std::to_string(c.h)},
      {"d_ff", std::to_string(c.d_ff)},
      {"n_layers", std::to_string(c.n_layers)},
      {"max_len", std::to_string(c.max_len)},
      {"norm_placement", norm_placement_name(c.norm_placement)},
      {"activation", activation_name(c.activation)},
      {"swish_beta", fmt_double(c.swish_beta)},
      {"pe_mode", pe_mode_name(c.pe_mode)},
      {"dropout_p", fmt_double(c.dropout_p)},
      {"attn_dropout_p", fmt_double(c.attn_dropout_p)},
      {"ln_eps", fmt_double(c.ln_eps)},
      {"embed_scale", embed_scale_name(c.embed_scale)},
  };
}

void apply_config_entry(ModelConfig& c, const std::string& key, const std::string& value) {
  if (key == "vocab_size") c.vocab_size = std::stoi(value);
  else if (key == "d_model") c.d_model = std::stoi(value);
  else if (key == "h") c.h = std::stoi(value);
  else if (key == "d_ff") c.d_ff = std::stoi(value);
  else if (key == "n_layers") c.n_layers = std::stoi(value);
  else if (key == "max_len") c.max_len = std::stoi(value);
  else if (key == "norm_placement") c.norm_placement = parse_norm_placement(value);
  else if (key == "activation") c.activation = parse_activation(value);
  else if (key == "swish_beta") c.swish_beta = std::stod(value);
  else if (key == "pe_mode") c.pe_mode = parse_pe_mode(value);
  else if (key == "dropout_p") c.dropout_p = std::stod(value);
  else if (key == "attn_dropout_p") c.attn_dropout_p = std::stod(value);
  else if (key == "ln_eps") c.ln_eps = std::stod(value);
  else if (key == "embed_scale") c.embed_scale = parse_embed_scale(value);
  else throw std::runtime_error("checkpoint: unknown config key '" + key + "'");
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
  out.write(kMagic, 4);
  write_u32(out, kVersion);

  const auto entries = config_entries(model.config);
  write_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [key, value] : entries) {
    write_str(out, key);
    write_str(out, value);
  }

  write_u32(out, static_cast<std::uint32_t>(model.params.size()));
  for (const auto& [name, m] : model.params) {
    write_str(out, name);
    write_u64(out, static_cast<std::uint64_t>(m.rows()));
    write_u64(out, static_cast<std::uint64_t>(m.cols()));
    for (std::size_t i = 0; i < m.size(); ++i) write_f64(out, m.data()[i]);
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  }
  const std::uint32_t version = read_u32(in);
  if (version != kVersion) {
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  }

  Model model;
  const std::uint32_t n_entries = read_u32(in);
  for (std::uint32_t i = 0; i < n_entries; ++i) {
    const std::string key = read_str(in);
    const std::string value = read_str(in);
    apply_config_entry(model.config, key, value);
  }
  model.config.validate();

  const std::uint32_t n_matrices = read_u32(in);
  for (std::uint32_t i = 0; i < n_matrices; ++i) {
    const std::string name = read_str(in);
    const auto rows = static_cast<int>(read_u64(in));
    const auto cols = static_cast<int>(read_u64(in));
    if (rows < 1 || cols < 1) {
      throw std::runtime_error("checkpoint: bad dims for matrix '" + name + "'");
    }
    Matrix m(rows, cols);
    for (std::size_t j = 0; j < m.size(); ++j) m.data()[j] = read_f64(in);
    model.params.emplace(name, std::move(m));
  }
  try {
    validate_params(model.config, model.params);
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error("checkpoint: " + std::string(e.what()));
  }
  return model;
}

}  // namespace attnkit
