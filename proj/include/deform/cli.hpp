#pragma once

// Pipeline commands behind the `deform` executable.

#include "deform/config.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace deform {

/// Writes the synthetic tile's L3 CSV, its gridded truth cube and the generator record.
void cmd_synth(const RunConfig& config);
/// Loads the configured L3 CSV, fills gaps and rasterizes it to `cube.defcube`.
void cmd_ingest(const RunConfig& config);
/// Trains the configured model on `data.cube`; learned models write `model.ckpt`.
void cmd_train(const RunConfig& config);
/// Test-window metrics, heatmaps, event diagnostics and baseline comparisons.
void cmd_eval(const RunConfig& config, const std::filesystem::path& checkpoint);
/// Zero-shot metrics on the target cube; the checkpoint file must not change.
void cmd_transfer(const RunConfig& config, const std::filesystem::path& checkpoint, const std::filesystem::path& target);
/// One comparison row per metrics file; `label=path` sets the row label.
void cmd_report(const std::filesystem::path& out, const std::vector<std::string>& metrics);

/// Parses arguments and dispatches. Errors print one line to stderr and return nonzero.
int run_cli(int argc, char** argv);

}  // namespace deform
