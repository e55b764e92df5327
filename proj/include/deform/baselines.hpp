#pragma once

// Closed-form per-pixel forecasters fitted once on the training epochs.

#include "deform/features.hpp"

#include <span>
#include <vector>

namespace deform {

enum class BaselineKind { linear, seasonal };

/// Coefficients per pixel, one row per design column:
/// linear [b0, b1] on (1, t_yr); seasonal adds [a, b] on (sin wt, cos wt).
struct PixelRegression {
  BaselineKind kind = BaselineKind::linear;
  Index height = 0;
  Index width = 0;
  Matrix coefficients;  // columns x pixels

  Frame coefficient_map(Index row) const;
  /// Forecast at `days` after the first epoch.
  Frame evaluate(double days) const;
};

/// Design matrix rows for the given epoch offsets (days since the first epoch).
Matrix baseline_design(BaselineKind kind, std::span<const double> days);

PixelRegression fit_baseline(BaselineKind kind, const DisplacementCube& cube, const SplitSpec& split);

/// One-shot fit on the training epochs, evaluated at the date of each target epoch.
std::vector<Frame> fit_predict_linear(const DisplacementCube& cube, const SplitSpec& split,
                                      std::span<const Index> target_epochs);
std::vector<Frame> fit_predict_seasonal(const DisplacementCube& cube, const SplitSpec& split,
                                        std::span<const Index> target_epochs);

/// Last observed frame for each target epoch.
std::vector<Frame> predict_persistence(const DisplacementCube& cube, std::span<const Index> target_epochs);

/// Target epochs of the test windows.
std::vector<Index> target_epochs(std::span<const Window> windows);

}  // namespace deform
