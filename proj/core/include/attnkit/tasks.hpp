#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "attnkit/rng.hpp"

namespace attnkit {

enum class TaskKind { kCopy, kReverse, kSort };

/// Synthetic sequence-to-sequence task. vocab_size counts payload symbols
/// only; payload ids start at 3, after PAD/BOS/EOS.
struct TaskSpec {
  TaskKind kind = TaskKind::kCopy;
  int vocab_size = 16;
  int min_len = 3;
  int max_len = 12;
  std::uint64_t seed = 0;

  /// Total token-id space a model needs for this task.
  int model_vocab() const { return vocab_size + 3; }
  void validate() const;
};

using TokenPair = std::pair<std::vector<int>, std::vector<int>>;

/// Random payload framed by BOS/EOS on both sides; the target payload is the
/// task transform of the source payload (copy, reverse, or ascending sort).
TokenPair sample_pair(const TaskSpec& spec, Rng& rng);

/// Fraction of matching non-PAD positions after trimming trailing PADs.
/// The trimmed sequences must have equal length.
double token_accuracy(std::span<const int> predicted, std::span<const int> target);

/// One example per line: "src_tokens<TAB>tgt_tokens", space-separated ids.
void dump_dataset(const std::filesystem::path& path, std::span<const TokenPair> examples);
std::vector<TokenPair> load_dataset(const std::filesystem::path& path);

}  // namespace attnkit
