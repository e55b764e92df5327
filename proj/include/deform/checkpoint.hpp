#pragma once

// DEFCKPT1 container: a magic line, a length-prefixed JSON header and a
// little-endian float64 payload holding every tensor.

#include "deform/model.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace deform {

using NamedTensors = std::vector<std::pair<std::string, ad::Tensor>>;

struct ModelCheckpoint {
  static constexpr const char* kMagic = "DEFCKPT1";
  static constexpr int kVersion = 1;

  int version = kVersion;
  nlohmann::json config;  // model config, includes "kind"
  nlohmann::json training = nlohmann::json::object();  // free-form training summary
  NamedTensors parameters;  // raw weights at the best epoch
  NamedTensors ema;         // EMA shadow at the best epoch; used for inference
  NormStats stats;          // source-tile normalization
  std::string source_tile;
};

/// Snapshot of a model's current weights; `ema` defaults to the same values.
ModelCheckpoint make_checkpoint(const Model& model, const NormStats& stats, const std::string& source_tile,
                                const std::vector<ad::Tensor>* parameters = nullptr,
                                const std::vector<ad::Tensor>* ema = nullptr);

/// Builds the model described by the checkpoint with the EMA (or raw) weights loaded.
std::unique_ptr<Model> instantiate(const ModelCheckpoint& ckpt, bool use_ema = true);

std::string serialize_checkpoint(const ModelCheckpoint& ckpt);
ModelCheckpoint deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& path);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

/// FNV-1a 64-bit digest of a file's bytes, as 16 hex digits.
std::string file_digest(const std::filesystem::path& path);

}  // namespace deform
