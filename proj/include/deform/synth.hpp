#pragma once

// Seeded synthetic tiles with known deformation fields.

#include "deform/common.hpp"
#include "deform/ingest.hpp"
#include "deform/raster.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace deform {

enum class Regime { trend, seasonal, coseismic, mixed };

std::string_view regime_name(Regime r);
/// Throws Error listing the accepted names.
Regime parse_regime(std::string_view name);

/// A smooth field mean + sum_{k,l <= order} c_kl cos(k pi u) cos(l pi v), with u, v the
/// position across the tile in [0, 1]. Coefficients are rescaled so sum |c_kl| = spread,
/// which bounds the field to [mean - spread, mean + spread].
struct FieldSpec {
  double mean = 0.0;
  double spread = 0.0;
  int order = 3;
};

class SmoothField {
 public:
  SmoothField() = default;
  SmoothField(const FieldSpec& spec, const Point2& origin_m, const Point2& extent_m, Rng rng);

  double operator()(const Point2& p) const;
  Frame sample(const GridSpec& grid) const;

  /// Upper bound on the spectral norm of the Hessian, in field units per m^2.
  double hessian_bound() const;
  double mean() const { return mean_; }
  double spread() const { return spread_; }

 private:
  Point2 origin_ = Point2::Zero();
  Point2 extent_ = Point2::Ones();
  int order_ = 0;
  double mean_ = 0.0;
  double spread_ = 0.0;
  std::vector<double> coeffs_;  // (order + 1)^2, k-major
};

struct RegimeSpec {
  Regime kind = Regime::mixed;
  FieldSpec velocity{-6.0, 5.0, 3};   // mm / yr
  FieldSpec amplitude{8.0, 4.0, 2};   // mm
  FieldSpec phase{0.6, 0.4, 2};       // rad
  FieldSpec step{-20.0, 12.0, 2};     // mm, coseismic only
  Index event_epoch = 110;            // first epoch carrying the step
  double noise_sigma = 0.5;           // mm
  std::uint64_t seed = 1;

  TileId tile{32, 34};
  Index height = 64;
  Index width = 64;
  Index epochs = 120;
  Date start = Date{std::chrono::year{2018}, std::chrono::January, std::chrono::day{1}};
  int cadence_days = 6;

  Index point_count = 6000;
  double dropout = 0.05;  // probability that a point misses an epoch

  /// Defaults for each regime; only `kind`-relevant fields are non-zero.
  static RegimeSpec preset(Regime kind);

  bool has_trend() const;
  bool has_seasonal() const;
  bool has_step() const { return kind == Regime::coseismic; }
};

struct SynthTile {
  RegimeSpec spec;
  DisplacementCube truth;   // noisy gridded truth, mm
  PointCloudSeries points;  // scattered samples of the same fields with their own noise
  SmoothField velocity;
  SmoothField amplitude;
  SmoothField phase;
  SmoothField step;

  /// Noise-free displacement at a location and epoch.
  double signal(const Point2& p, Index epoch) const;
};

/// Deterministic for a given spec (including seed).
SynthTile generate_tile(const RegimeSpec& spec);

}  // namespace deform
