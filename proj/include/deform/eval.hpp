#pragma once

// Forecast metrics, event-centred diagnostics and report serialization.

#include "deform/checkpoint.hpp"
#include "deform/features.hpp"
#include "deform/model.hpp"

#include "json.hpp"

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace deform {

inline constexpr std::array<double, 3> kRelativeThresholds{0.10, 0.20, 0.50};
inline constexpr std::array<double, 4> kAbsoluteThresholdsMm{1.0, 0.5, 0.2, 0.1};
inline constexpr double kRelativeExclusionMm = 1e-6;

struct BinnedMae {
  std::vector<double> edges_mm;  // 11 decile edges of |truth|
  std::vector<double> mae_mm;    // 10 bins; 0 for an empty bin
  std::vector<Index> counts;
};

struct MetricsReport {
  double rmse_mm = 0.0;
  double mae_mm = 0.0;
  double r2 = 0.0;
  std::array<double, 3> acc_rel{};  // percent with |err| < p |truth|
  std::array<double, 4> acc_abs{};  // percent with |err| < threshold
  std::vector<double> ssim;         // per epoch
  std::vector<double> pearson;      // per epoch
  BinnedMae binned;
  Index relative_excluded = 0;
  Index epochs = 0;
  Index pixels = 0;

  double mean_ssim() const;
  double mean_pearson() const;

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
};

/// Pooled metrics over all epochs and pixels. Throws ShapeError on mismatched or empty input.
MetricsReport compute_metrics(std::span<const Frame> pred_mm, std::span<const Frame> truth_mm);

/// Mean SSIM with an 11 x 11 Gaussian window (sigma 1.5) truncated and renormalized at the
/// border, constants (0.01 R)^2 and (0.03 R)^2.
double ssim(const Frame& a, const Frame& b, double dynamic_range);
/// Pearson correlation of the flattened maps; 1 for identical maps, 0 when either is constant otherwise.
double pearson(const Frame& a, const Frame& b);

/// Predictions and truth for a set of forecast epochs.
struct Evaluation {
  std::vector<Index> epochs;
  std::vector<Frame> pred_mm;
  std::vector<Frame> truth_mm;
  MetricsReport metrics;
};

Evaluation evaluate_frames(std::vector<Frame> pred_mm, const DisplacementCube& truth, std::vector<Index> epochs);

/// Runs the model on `windows` and denormalizes with `stats`.
Evaluation evaluate_model(Model& model, const SampleSet& samples, std::span<const Window> windows,
                          const NormStats& stats);

/// Features for `cube` normalized with the checkpoint's statistics (static indicators are
/// fitted on this cube's training epochs), forecasts on the test windows or, with
/// `all_windows`, on every window.
/// The checkpoint itself is not modified.
Evaluation evaluate_checkpoint(const ModelCheckpoint& ckpt, const DisplacementCube& cube, const SplitSpec& split,
                               bool all_windows = false);

/// Zero-shot evaluation of a source checkpoint on a target tile's test epochs.
/// Throws ShapeError when the target grid differs from the checkpoint grid.
Evaluation cross_site_evaluate(const ModelCheckpoint& ckpt, const DisplacementCube& target, const SplitSpec& split);

struct PixelCurve {
  std::string role;  // largest_step, step_edge, background
  Index row = 0;
  Index col = 0;
  std::vector<double> error_mm;  // pred - truth over the window epochs
};

struct EventDiagnostics {
  Index event_epoch = 0;
  std::vector<Index> epochs;          // event_epoch - w .. event_epoch + w, clipped to the series
  std::vector<double> mean_abs_error; // map-mean |pred - truth| per window epoch
  std::vector<PixelCurve> pixels;
};

/// Event epoch is the first epoch after the largest map-mean absolute one-step change in
/// `truth`. The series must be consecutive epochs, longer than 2 * half_window + 1.
EventDiagnostics event_centred_diagnostics(std::span<const Frame> pred_mm, std::span<const Frame> truth_mm,
                                           std::span<const Index> epochs, Index half_window = 10);

void write_metrics_json(const MetricsReport& m, const std::filesystem::path& path);
MetricsReport read_metrics_json(const std::filesystem::path& path);
std::string metrics_csv_header();
std::string metrics_csv_row(const std::string& label, const MetricsReport& m);
void write_metrics_csv(const std::string& label, const MetricsReport& m, const std::filesystem::path& path);
void write_diagnostics_csv(const EventDiagnostics& d, const std::filesystem::path& path);

/// 8-bit binary PGM; values map linearly from [lo, hi] to [0, 255] and are clamped.
void write_pgm(const Frame& map, double lo, double hi, const std::filesystem::path& path);
/// Truth, prediction and residual heatmaps per epoch plus a mapping sidecar `heatmaps.txt`.
void write_heatmaps(const Evaluation& e, const std::filesystem::path& dir);

}  // namespace deform
