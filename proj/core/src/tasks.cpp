#include "attnkit/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "attnkit/transformer.hpp"

namespace attnkit {

void TaskSpec::validate() const {
  if (vocab_size < 4) throw std::invalid_argument("task: vocab_size must be >= 4");
  if (min_len < 1 || min_len > max_len) {
    throw std::invalid_argument("task: need 1 <= min_len <= max_len");
  }
}

TokenPair sample_pair(const TaskSpec& spec, Rng& rng) {
  spec.validate();
  const int len = spec.min_len + static_cast<int>(rng.below(
                                     static_cast<std::uint64_t>(spec.max_len - spec.min_len + 1)));
  std::vector<int> payload(len);
  for (int& t : payload) {
    t = 3 + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.vocab_size)));
  }

  std::vector<int> transformed = payload;
  switch (spec.kind) {
    case TaskKind::kCopy:
      break;
    case TaskKind::kReverse:
      std::reverse(transformed.begin(), transformed.end());
      break;
    case TaskKind::kSort:
      std::sort(transformed.begin(), transformed.end());
      break;
  }

  auto frame = [](const std::vector<int>& body) {
    std::vector<int> out;
    out.reserve(body.size() + 2);
    out.push_back(kBosToken);
    out.insert(out.end(), body.begin(), body.end());
    out.push_back(kEosToken);
    return out;
  };
  return {frame(payload), frame(transformed)};
}

double token_accuracy(std::span<const int> predicted, std::span<const int> target) {
  auto trimmed = [](std::span<const int> s) {
    std::size_t n = s.size();
    while (n > 0 && s[n - 1] == kPadToken) --n;
    return s.subspan(0, n);
  };
  const auto p = trimmed(predicted);
  const auto t = trimmed(target);
  if (p.size() != t.size()) {
    throw std::invalid_argument("token_accuracy: lengths differ after PAD-trim: " +
                                std::to_string(p.size()) + " vs " + std::to_string(t.size()));
  }
  std::size_t counted = 0;
  std::size_t matched = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] == kPadToken && p[i] == kPadToken) continue;
    ++counted;
    if (p[i] == t[i]) ++matched;
  }
  if (counted == 0) return 1.0;
  return static_cast<double>(matched) / static_cast<double>(counted);
}

void dump_dataset(const std::filesystem::path& path, std::span<const TokenPair> examples) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (const auto& [src, tgt] : examples) {
    for (std::size_t i = 0; i < src.size(); ++i) out << (i ? " " : "") << src[i];
    out << '\t';
    for (std::size_t i = 0; i < tgt.size(); ++i) out << (i ? " " : "") << tgt[i];
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::vector<TokenPair> load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<TokenPair> examples;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw std::runtime_error("malformed dataset line (missing tab): " + line);
    }
    auto parse_ints = [](const std::string& text) {
      std::vector<int> ids;
      std::istringstream ss(text);
      int v = 0;
      while (ss >> v) ids.push_back(v);
      return ids;
    };
    examples.emplace_back(parse_ints(line.substr(0, tab)), parse_ints(line.substr(tab + 1)));
  }
  return examples;
}

}  // namespace attnkit
