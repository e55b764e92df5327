#pragma once

// Run configuration read from TOML with sections [run] [data] [synth] [model] [loss] [optim].

#include "deform/stgcn.hpp"
#include "deform/synth.hpp"
#include "deform/training.hpp"
#include "deform/transformer.hpp"

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace deform {

/// Every violated field, reported together.
class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

enum class ModelKind { transformer, stgcn, linear, seasonal, persistence };
std::string_view model_kind_name(ModelKind k);
bool is_learned(ModelKind k);

struct RunConfig {
  // [run]
  std::string name = "run";
  std::uint64_t seed = 0;
  std::filesystem::path out = "out";

  // [data]
  std::filesystem::path input;  // EGMS L3 CSV read by `ingest`
  std::filesystem::path cube;   // gridded cube read by `train` / `eval`
  Index height = 64;
  Index width = 64;
  double train_fraction = 0.8;
  Index history = 16;
  double max_missing_fraction = 0.2;

  // [synth]
  RegimeSpec synth = RegimeSpec::preset(Regime::mixed);

  // [model]
  ModelKind kind = ModelKind::transformer;
  bool multimodal = true;
  TransformerConfig transformer;
  StgcnConfig stgcn;

  // [loss] and [optim]
  std::string loss_preset = "composite";
  TrainConfig train;

  SplitSpec split() const { return SplitSpec{train_fraction}; }
  /// Model config with grid, history and channel count filled in from [data] and [model].
  nlohmann::json model_json() const;
  /// Checks the fields `command` relies on; throws ConfigError listing all problems.
  void validate(std::string_view command) const;
};

/// Parses TOML text; unknown keys and type mismatches are collected into one ConfigError.
RunConfig parse_run_config(std::string_view text, const std::string& source = "config");
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace deform
