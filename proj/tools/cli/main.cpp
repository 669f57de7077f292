#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "attnkit/analysis.hpp"
#include "attnkit/checkpoint.hpp"
#include "attnkit/gradcheck.hpp"
#include "attnkit/tasks.hpp"
#include "attnkit/training.hpp"
#include "attnkit/transformer.hpp"

namespace {

using namespace attnkit;

struct ConfigFile {
  ModelConfig model;
  TrainConfig train;
  std::set<std::string> keys_seen;
};

bool parse_bool(const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw std::invalid_argument("expected boolean (0|1|true|false), got '" + v + "'");
}

void apply_config_line(ConfigFile& cfg, const std::string& key, const std::string& value) {
  ModelConfig& m = cfg.model;
  TrainConfig& t = cfg.train;
  if (key == "vocab_size") m.vocab_size = std::stoi(value);
  else if (key == "d_model") m.d_model = std::stoi(value);
  else if (key == "h") m.h = std::stoi(value);
  else if (key == "d_ff") m.d_ff = std::stoi(value);
  else if (key == "n_layers") m.n_layers = std::stoi(value);
  else if (key == "max_len") m.max_len = std::stoi(value);
  else if (key == "norm_placement") m.norm_placement = parse_norm_placement(value);
  else if (key == "activation") m.activation = parse_activation(value);
  else if (key == "swish_beta") m.swish_beta = std::stod(value);
  else if (key == "pe_mode") m.pe_mode = parse_pe_mode(value);
  else if (key == "dropout_p") m.dropout_p = std::stod(value);
  else if (key == "attn_dropout_p") m.attn_dropout_p = std::stod(value);
  else if (key == "ln_eps") m.ln_eps = std::stod(value);
  else if (key == "embed_scale") m.embed_scale = parse_embed_scale(value);
  else if (key == "beta1") t.beta1 = std::stod(value);
  else if (key == "beta2") t.beta2 = std::stod(value);
  else if (key == "adam_eps") t.adam_eps = std::stod(value);
  else if (key == "warmup_steps") t.warmup_steps = std::stoi(value);
  else if (key == "label_smoothing") t.label_smoothing = std::stod(value);
  else if (key == "clip_threshold") t.clip_threshold = std::stod(value);
  else if (key == "weight_decay") t.weight_decay = std::stod(value);
  else if (key == "decoupled_decay") t.decoupled_decay = parse_bool(value);
  else if (key == "batch_size") t.batch_size = std::stoi(value);
  else if (key == "max_steps") t.max_steps = std::stoi(value);
  else if (key == "seed") t.seed = std::stoull(value);
  else if (key == "eval_every") t.eval_every = std::stoi(value);
  else if (key == "eval_examples") t.eval_examples = std::stoi(value);
  else if (key == "target_accuracy") t.target_accuracy = std::stod(value);
  else throw std::invalid_argument("unknown config key '" + key + "'");
  cfg.keys_seen.insert(key);
}

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

ConfigFile load_config(const std::string& path) {
  ConfigFile cfg;
  if (path.empty()) return cfg;
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string text = trim(line);
    if (text.empty() || text[0] == '#') continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected key=value");
    }
    apply_config_line(cfg, trim(text.substr(0, eq)), trim(text.substr(eq + 1)));
  }
  return cfg;
}

std::vector<int> parse_token_list(const std::string& text) {
  std::vector<int> ids;
  std::string cleaned = text;
  for (char& c : cleaned) {
    if (c == ',') c = ' ';
  }
  std::istringstream ss(cleaned);
  int v = 0;
  while (ss >> v) ids.push_back(v);
  return ids;
}

TaskKind parse_task(const std::string& name) {
  if (name == "copy") return TaskKind::kCopy;
  if (name == "reverse") return TaskKind::kReverse;
  if (name == "sort") return TaskKind::kSort;
  throw std::invalid_argument("unknown task '" + name + "' (copy|reverse|sort)");
}

std::vector<int> frame_payload(const std::vector<int>& payload) {
  std::vector<int> out;
  out.reserve(payload.size() + 2);
  out.push_back(kBosToken);
  out.insert(out.end(), payload.begin(), payload.end());
  out.push_back(kEosToken);
  return out;
}

// Greedy output vs target payload; a missing or extra tail counts as wrong.
double generation_accuracy(const std::vector<int>& predicted, const std::vector<int>& target) {
  if (target.empty()) return predicted.empty() ? 1.0 : 0.0;
  std::size_t matched = 0;
  for (std::size_t i = 0; i < target.size() && i < predicted.size(); ++i) {
    if (predicted[i] == target[i]) ++matched;
  }
  const std::size_t denom = std::max(target.size(), predicted.size());
  return static_cast<double>(matched) / static_cast<double>(denom);
}

int run_train(const std::string& task_name, const std::string& config_path,
              const std::string& out_path, const std::string& metrics_path,
              std::uint64_t seed, bool seed_given, int task_vocab, int min_len, int max_len) {
  ConfigFile cfg = load_config(config_path);
  if (seed_given) cfg.train.seed = seed;

  TaskSpec task;
  task.kind = parse_task(task_name);
  task.vocab_size = task_vocab;
  task.min_len = min_len;
  task.max_len = max_len;
  task.seed = cfg.train.seed;
  if (!cfg.keys_seen.count("vocab_size")) cfg.model.vocab_size = task.model_vocab();

  Model model;
  model.config = cfg.model;
  Rng init_rng(cfg.train.seed);
  model.params = init_params(model.config, init_rng);

  std::ofstream metrics;
  if (!metrics_path.empty()) {
    metrics.open(metrics_path);
    if (!metrics) throw std::runtime_error("cannot open metrics file " + metrics_path);
  }
  const TrainResult result = train(model, cfg.train, task, metrics_path.empty() ? nullptr : &metrics);
  save_checkpoint(out_path, model);
  std::printf("trained %d steps, held-out accuracy %.6f, checkpoint %s\n",
              result.steps_completed, result.final_accuracy, out_path.c_str());
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& task_name, int n_examples,
             std::uint64_t seed, int task_vocab, int min_len, int max_len) {
  const Model model = load_checkpoint(ckpt);
  TaskSpec task;
  task.kind = parse_task(task_name);
  task.vocab_size = task_vocab;
  task.min_len = min_len;
  task.max_len = max_len;
  Rng rng(seed);
  double acc_sum = 0.0;
  for (int i = 0; i < n_examples; ++i) {
    const TokenPair pair = sample_pair(task, rng);
    const std::vector<int> tgt_payload(pair.second.begin() + 1, pair.second.end() - 1);
    const std::vector<int> pred =
        greedy_generate(model, pair.first, static_cast<int>(tgt_payload.size()) + 4);
    acc_sum += generation_accuracy(pred, tgt_payload);
  }
  std::printf("%.6f\n", acc_sum / n_examples);
  return 0;
}

int run_generate(const std::string& ckpt, const std::string& src_text, int max_steps) {
  const Model model = load_checkpoint(ckpt);
  const std::vector<int> payload = parse_token_list(src_text);
  if (payload.empty()) throw std::invalid_argument("--src holds no token ids");
  const std::vector<int> out = greedy_generate(model, frame_payload(payload), max_steps);
  for (std::size_t i = 0; i < out.size(); ++i) std::printf("%s%d", i ? " " : "", out[i]);
  std::printf("\n");
  return 0;
}

int cmd_gradcheck(const std::string& module) {
  const std::vector<GradCheckReport> reports = run_gradcheck(module);
  bool ok = true;
  double worst = 0.0;
  for (const GradCheckReport& r : reports) {
    std::printf("%-14s %3d instances  max rel err %.3e\n", r.suite.c_str(), r.instances,
                r.max_rel_err);
    worst = std::max(worst, r.max_rel_err);
    ok = ok && r.max_rel_err < kGradCheckTol;
  }
  std::printf("max rel err %.3e (tolerance %.0e)\n", worst, kGradCheckTol);
  return ok ? 0 : 1;
}

int run_benchmark(const std::string& ns_text, int d, int repeats) {
  std::vector<int> ns = parse_token_list(ns_text);
  if (ns.empty()) throw std::invalid_argument("--ns holds no lengths");
  const std::vector<ScalingRow> rows = benchmark_scaling(ns, d, repeats);
  std::printf("n\tmedian_ms\tflops\n");
  for (const ScalingRow& r : rows) {
    std::printf("%d\t%.3f\t%.0f\n", r.n, r.median_seconds * 1e3, r.flops);
  }
  std::printf("fitted_exponent\t%.3f\n", fitted_loglog_slope(rows));
  return 0;
}

int run_inspect(const std::string& ckpt, const std::string& src_text,
                const std::string& out_dir) {
  const Model model = load_checkpoint(ckpt);
  const std::vector<int> payload = parse_token_list(src_text);
  if (payload.empty()) throw std::invalid_argument("--src holds no token ids");
  const std::vector<int> src = frame_payload(payload);

  const EncoderActivations acts = encode_with_attention(model, src);
  std::filesystem::create_directories(out_dir);
  for (std::size_t layer = 0; layer < acts.layers.size(); ++layer) {
    export_attention(acts.layers[layer], out_dir, "attn_layer" + std::to_string(layer));
  }
  const auto profile = entropy_profile(model, src);
  std::ofstream ent(std::filesystem::path(out_dir) / "entropy_profile.tsv");
  if (!ent) throw std::runtime_error("cannot write entropy profile in " + out_dir);
  ent << "layer";
  for (std::size_t h = 0; h < profile.front().size(); ++h) ent << "\thead" << h;
  ent << '\n';
  for (std::size_t layer = 0; layer < profile.size(); ++layer) {
    ent << layer;
    char buf[40];
    for (const double v : profile[layer]) {
      std::snprintf(buf, sizeof(buf), "%.6f", v);
      ent << '\t' << buf;
    }
    ent << '\n';
  }
  std::printf("wrote %zu attention maps and entropy profile to %s\n",
              acts.layers.size() * static_cast<std::size_t>(model.config.h), out_dir.c_str());
  return 0;
}

int run_pe_dump(int n, int d) {
  const Matrix pe = sinusoidal_pe(n, d);
  char buf[40];
  for (int i = 0; i < pe.rows(); ++i) {
    for (int j = 0; j < pe.cols(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", pe(i, j));
      std::printf("%s%s", j ? "," : "", buf);
    }
    std::printf("\n");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attention/transformer engine"};
  app.require_subcommand(1);

  std::string task_name = "copy";
  std::string config_path;
  std::string out_path;
  std::string metrics_path;
  std::string ckpt_path;
  std::string src_text;
  std::string out_dir;
  std::string module = "all";
  std::string ns_text = "256,512,1024,2048";
  std::uint64_t seed = 42;
  int n_examples = 64;
  int task_vocab = 16;
  int min_len = 3;
  int max_len = 12;
  int max_steps = 64;
  int bench_d = 64;
  int repeats = 5;
  int pe_n = 16;
  int pe_d = 16;

  CLI::App* train_cmd = app.add_subcommand("train", "train on a synthetic task");
  train_cmd->add_option("--task", task_name, "copy|reverse|sort");
  train_cmd->add_option("--config", config_path, "key=value config file");
  train_cmd->add_option("--out", out_path, "checkpoint output path")->required();
  train_cmd->add_option("--metrics", metrics_path, "JSONL metrics output path");
  CLI::Option* seed_opt = train_cmd->add_option("--seed", seed, "seed override");
  train_cmd->add_option("--task-vocab", task_vocab, "payload symbol count");
  train_cmd->add_option("--min-len", min_len, "min payload length");
  train_cmd->add_option("--max-len", max_len, "max payload length");

  CLI::App* eval_cmd = app.add_subcommand("eval", "greedy-decode accuracy on fresh examples");
  eval_cmd->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  eval_cmd->add_option("--task", task_name, "copy|reverse|sort");
  eval_cmd->add_option("--n-examples", n_examples, "number of examples");
  eval_cmd->add_option("--seed", seed, "sampling seed");
  eval_cmd->add_option("--task-vocab", task_vocab, "payload symbol count");
  eval_cmd->add_option("--min-len", min_len, "min payload length");
  eval_cmd->add_option("--max-len", max_len, "max payload length");

  CLI::App* gen_cmd = app.add_subcommand("generate", "greedy decode for one source");
  gen_cmd->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  gen_cmd->add_option("--src", src_text, "payload token ids, space or comma separated")
      ->required();
  gen_cmd->add_option("--max-steps", max_steps, "generation cap");

  CLI::App* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suites");
  grad_cmd->add_option("--module", module, "all|attention|layernorm|ffn|model");

  CLI::App* bench_cmd = app.add_subcommand("benchmark", "attention scaling benchmark");
  bench_cmd->add_option("--ns", ns_text, "comma-separated sequence lengths");
  bench_cmd->add_option("--d", bench_d, "head dimension");
  bench_cmd->add_option("--repeats", repeats, "timed repeats per length");

  CLI::App* inspect_cmd = app.add_subcommand("inspect", "export attention maps and entropy");
  inspect_cmd->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  inspect_cmd->add_option("--src", src_text, "payload token ids")->required();
  inspect_cmd->add_option("--out-dir", out_dir, "output directory")->required();

  CLI::App* pe_cmd = app.add_subcommand("pe-dump", "sinusoidal positional encoding CSV");
  pe_cmd->add_option("--n", pe_n, "positions")->required();
  pe_cmd->add_option("--d", pe_d, "model dimension")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints help, exit 0
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    std::cerr << app.help() << "\n";
    return 2;
  }

  try {
    if (train_cmd->parsed()) {
      return run_train(task_name, config_path, out_path, metrics_path, seed,
                       seed_opt->count() > 0, task_vocab, min_len, max_len);
    }
    if (eval_cmd->parsed()) {
      return run_eval(ckpt_path, task_name, n_examples, seed, task_vocab, min_len, max_len);
    }
    if (gen_cmd->parsed()) return run_generate(ckpt_path, src_text, max_steps);
    if (grad_cmd->parsed()) return cmd_gradcheck(module);
    if (bench_cmd->parsed()) return run_benchmark(ns_text, bench_d, repeats);
    if (inspect_cmd->parsed()) return run_inspect(ckpt_path, src_text, out_dir);
    if (pe_cmd->parsed()) return run_pe_dump(pe_n, pe_d);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
