#pragma once

#include "deform/common.hpp"
#include "deform/ingest.hpp"
#include "deform/raster.hpp"

#include <array>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace deform {

inline constexpr double kDaysPerYear = 365.25;
inline constexpr double kAnnualOmega = 2.0 * M_PI / kDaysPerYear;  // radians per day

/// Chronological split; the same fraction is applied to epochs and to windows.
struct SplitSpec {
  double train_fraction = 0.8;

  /// floor(train_fraction * T); throws unless 2 <= T_train < T.
  Index train_epochs(Index total_epochs) const;
  Index train_windows(Index total_windows) const;
};

/// Ordinary least squares for many right-hand sides sharing one design matrix.
/// Column-pivoted QR; throws FitError naming `what` when the design is rank deficient.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> least_squares(
    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& design,
    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& rhs, const std::string& what) {
  Eigen::ColPivHouseholderQR<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>> qr(design);
  if (design.rows() < design.cols() || qr.rank() < design.cols())
    throw FitError(what + ": rank-deficient design (" + std::to_string(design.rows()) + " epochs, " +
                   std::to_string(design.cols()) + " parameters, rank " + std::to_string(qr.rank()) + ")");
  return qr.solve(rhs);
}

/// Columns [1, t_yr, t_yr^2, sin(w t), cos(w t)] for the first `count` epochs, with t measured
/// from the first epoch (days for the harmonic, years for the polynomial).
Matrix harmonic_trend_design(std::span<const double> epoch_days, Index count);

/// Stacks T frames into a (T x H*W) matrix, one column per pixel.
Matrix frames_to_columns(const std::vector<Frame>& frames, Index count);

struct StaticMaps {
  Frame velocity;            // mm / yr
  Frame acceleration;        // mm / yr^2 (second derivative of the fitted quadratic)
  Frame seasonal_amplitude;  // mm

  const Frame& channel(int i) const;
  static constexpr std::array<const char*, 3> kNames{"velocity", "acceleration", "seasonal_amplitude"};
};

/// Per-pixel polynomial-plus-annual-harmonic fit over the training epochs only.
StaticMaps fit_static_indicators(const DisplacementCube& cube, const SplitSpec& split);

struct TemporalEncoding {
  std::vector<double> sin;
  std::vector<double> cos;
};

/// (sin, cos) of 2*pi*doy/365.25 with zero-based day of year.
TemporalEncoding encode_time(const AcquisitionCalendar& calendar);

struct NormStats {
  Frame pixel_mean;
  Frame pixel_std;
  std::array<double, 3> static_mean{0.0, 0.0, 0.0};
  std::array<double, 3> static_std{1.0, 1.0, 1.0};
  double epsilon = 1e-6;
};

NormStats compute_norm_stats(const DisplacementCube& cube, const StaticMaps& statics, const SplitSpec& split);

inline constexpr Index kMultimodalChannels = 6;

/// T x 6 x H x W normalized stack: [displacement, velocity, acceleration, amplitude, sin, cos].
struct MultimodalCube {
  GridSpec grid;
  AcquisitionCalendar calendar;
  NormStats stats;
  Index epochs = 0;
  Index channels = kMultimodalChannels;
  std::vector<double> values;

  Index frame_size() const { return grid.height * grid.width; }
  const double* frame_data(Index t, Index c) const {
    return values.data() + (t * channels + c) * frame_size();
  }
  Eigen::Map<const Frame> frame(Index t, Index c) const {
    return Eigen::Map<const Frame>(frame_data(t, c), grid.height, grid.width);
  }
};

MultimodalCube normalize(const DisplacementCube& cube, const StaticMaps& statics, const TemporalEncoding& encoding,
                         const NormStats& stats);

/// Inverse of the per-pixel displacement transform: pred * sigma_d + mu_d.
Frame denormalize(const Frame& normalized, const NormStats& stats);
Frame normalize_displacement(const Frame& mm, const NormStats& stats);

/// Input epochs [start, start + history), target epoch start + history.
struct Window {
  Index start = 0;
  Index target = 0;
};

struct SampleSet {
  std::shared_ptr<const MultimodalCube> cube;
  std::shared_ptr<const DisplacementCube> truth;  // millimetres, same calendar
  Index history = 16;
  std::vector<Window> windows;
  Index train_count = 0;

  std::span<const Window> train() const { return {windows.data(), static_cast<std::size_t>(train_count)}; }
  std::span<const Window> test() const {
    return {windows.data() + train_count, windows.size() - static_cast<std::size_t>(train_count)};
  }
};

/// T - L sliding windows in chronological order of target epoch; the first
/// floor(f * (T - L)) are training samples. Requires T - L >= 5.
SampleSet make_windows(std::shared_ptr<const MultimodalCube> cube, std::shared_ptr<const DisplacementCube> truth,
                       Index history, const SplitSpec& split);

/// Everything the models consume for one tile.
struct FeatureBundle {
  StaticMaps statics;
  TemporalEncoding encoding;
  NormStats stats;
  std::shared_ptr<const MultimodalCube> cube;
  std::shared_ptr<const DisplacementCube> truth;
  SampleSet samples;
};

/// In-tile features: statistics estimated from this cube's training window.
FeatureBundle build_features(const DisplacementCube& cube, const SplitSpec& split, Index history);

/// Cross-site features: static indicators recomputed on the target's training
/// window, every channel normalized with the source statistics.
FeatureBundle build_features_with_stats(const DisplacementCube& cube, const SplitSpec& split, Index history,
                                        const NormStats& source_stats);

}  // namespace deform
