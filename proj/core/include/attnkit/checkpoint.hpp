#pragma once

#include <filesystem>
#include <string>

#include "attnkit/transformer.hpp"

namespace attnkit {

// Enum <-> text names shared by checkpoints and config files.
std::string norm_placement_name(NormPlacement p);
std::string activation_name(ActivationKind k);
std::string pe_mode_name(PeMode m);
std::string embed_scale_name(EmbedScale s);
NormPlacement parse_norm_placement(const std::string& s);
ActivationKind parse_activation(const std::string& s);
PeMode parse_pe_mode(const std::string& s);
EmbedScale parse_embed_scale(const std::string& s);

/// Versioned binary checkpoint: magic "ATNF", format version, config as
/// length-prefixed key/value text, then the canonically ordered named
/// matrices as little-endian 64-bit reals. Round trips are bit-exact.
void save_checkpoint(const std::filesystem::path& path, const Model& model);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace attnkit
