#include "deform/synth.hpp"

#include "deform/features.hpp"

#include <cmath>

namespace deform {

std::string_view regime_name(Regime r) {
  switch (r) {
    case Regime::trend: return "trend";
    case Regime::seasonal: return "seasonal";
    case Regime::coseismic: return "coseismic";
    case Regime::mixed: return "mixed";
  }
  return "mixed";
}

Regime parse_regime(std::string_view name) {
  for (Regime r : {Regime::trend, Regime::seasonal, Regime::coseismic, Regime::mixed})
    if (regime_name(r) == name) return r;
  throw Error("unknown regime '" + std::string(name) + "' (expected trend, seasonal, coseismic or mixed)");
}

SmoothField::SmoothField(const FieldSpec& spec, const Point2& origin_m, const Point2& extent_m, Rng rng)
    : origin_(origin_m), extent_(extent_m), order_(spec.order), mean_(spec.mean), spread_(spec.spread) {
  if (spec.order < 0) throw Error("field order must be non-negative");
  const int n = spec.order + 1;
  coeffs_.assign(static_cast<std::size_t>(n * n), 0.0);
  double total = 0.0;
  for (int k = 0; k < n; ++k)
    for (int l = 0; l < n; ++l) {
      if (k == 0 && l == 0) continue;  // the mean carries the constant term
      const double c = rng.normal() / (1.0 + k * k + l * l);
      coeffs_[k * n + l] = c;
      total += std::abs(c);
    }
  if (total > 0.0)
    for (double& c : coeffs_) c *= spread_ / total;
}

double SmoothField::operator()(const Point2& p) const {
  const double u = (p.x() - origin_.x()) / extent_.x();
  const double v = (p.y() - origin_.y()) / extent_.y();
  const int n = order_ + 1;
  double f = mean_;
  for (int k = 0; k < n; ++k) {
    const double ck = std::cos(k * M_PI * u);
    for (int l = 0; l < n; ++l) f += coeffs_[k * n + l] * ck * std::cos(l * M_PI * v);
  }
  return f;
}

Frame SmoothField::sample(const GridSpec& grid) const {
  Frame f(grid.height, grid.width);
  for (Index r = 0; r < grid.height; ++r)
    for (Index c = 0; c < grid.width; ++c) f(r, c) = (*this)(grid.pixel_centre(r, c));
  return f;
}

double SmoothField::hessian_bound() const {
  // Each term c cos(ax) cos(by) has a Hessian with Frobenius norm at most |c| (a^2 + b^2).
  const int n = order_ + 1;
  double m = 0.0;
  for (int k = 0; k < n; ++k)
    for (int l = 0; l < n; ++l) {
      const double a = k * M_PI / extent_.x();
      const double b = l * M_PI / extent_.y();
      m += std::abs(coeffs_[k * n + l]) * (a * a + b * b);
    }
  return m;
}

RegimeSpec RegimeSpec::preset(Regime kind) {
  RegimeSpec s;
  s.kind = kind;
  switch (kind) {
    case Regime::trend:
      s.velocity = {-8.0, 5.0, 3};
      s.amplitude = {0.0, 0.0, 0};
      s.phase = {0.0, 0.0, 0};
      s.step = {0.0, 0.0, 0};
      break;
    case Regime::seasonal:
      s.velocity = {-2.0, 2.0, 2};
      s.amplitude = {8.0, 4.0, 2};
      s.step = {0.0, 0.0, 0};
      break;
    case Regime::coseismic:
      s.velocity = {-3.0, 2.0, 2};
      s.amplitude = {4.0, 2.0, 2};
      s.step = {-20.0, 12.0, 2};
      s.event_epoch = 110;
      break;
    case Regime::mixed:
      s.step = {0.0, 0.0, 0};
      break;
  }
  return s;
}

bool RegimeSpec::has_trend() const { return velocity.mean != 0.0 || velocity.spread != 0.0; }
bool RegimeSpec::has_seasonal() const { return amplitude.mean != 0.0 || amplitude.spread != 0.0; }

double SynthTile::signal(const Point2& p, Index epoch) const {
  const double days = truth.calendar.epoch_days()[epoch];
  double d = velocity(p) * days / kDaysPerYear + amplitude(p) * std::sin(kAnnualOmega * days + phase(p));
  if (spec.has_step() && epoch >= spec.event_epoch) d += step(p);
  return d;
}

SynthTile generate_tile(const RegimeSpec& spec) {
  if (spec.epochs < 2) throw Error("synth: need at least 2 epochs");
  if (spec.noise_sigma < 0.0) throw Error("synth: noise_sigma must be non-negative");
  if (spec.dropout < 0.0 || spec.dropout >= 1.0) throw Error("synth: dropout must lie in [0, 1)");
  if (spec.has_step() && (spec.event_epoch < 1 || spec.event_epoch >= spec.epochs))
    throw Error("synth: event epoch " + std::to_string(spec.event_epoch) + " outside (0, " +
                std::to_string(spec.epochs) + ")");

  SynthTile tile;
  tile.spec = spec;
  const Rng root(spec.seed);
  const GridSpec grid = GridSpec::for_tile(spec.tile, spec.height, spec.width);
  auto field = [&](const FieldSpec& f, const char* tag) {
    return SmoothField(f, grid.origin_m, grid.extent_m, root.split(std::string_view(tag)));
  };
  tile.velocity = field(spec.velocity, "velocity");
  tile.amplitude = field(spec.amplitude, "amplitude");
  tile.phase = field(spec.phase, "phase");
  tile.step = field(spec.step, "step");

  tile.truth.grid = grid;
  tile.truth.calendar = AcquisitionCalendar::regular(spec.start, spec.epochs, spec.cadence_days);
  tile.truth.frames.assign(static_cast<std::size_t>(spec.epochs), Frame::Zero(grid.height, grid.width));

  // Field values at pixel centres are shared by every epoch.
  const Frame vel = tile.velocity.sample(grid);
  const Frame amp = tile.amplitude.sample(grid);
  const Frame pha = tile.phase.sample(grid);
  const Frame stp = tile.step.sample(grid);
  const Rng pixel_noise = root.split(std::string_view("pixel-noise"));
  parallel_for(spec.epochs, [&](Index t) {
    const double days = tile.truth.calendar.epoch_days()[t];
    Rng rng = pixel_noise.split(static_cast<std::uint64_t>(t));
    Frame& f = tile.truth.frames[t];
    f = (vel.array() * (days / kDaysPerYear) + amp.array() * (pha.array() + kAnnualOmega * days).sin()).matrix();
    if (spec.has_step() && t >= spec.event_epoch) f += stp;
    if (spec.noise_sigma > 0.0)
      for (Index i = 0; i < f.size(); ++i) f.data()[i] += rng.normal(0.0, spec.noise_sigma);
  });

  tile.points.tile = spec.tile;
  tile.points.calendar = tile.truth.calendar;
  tile.points.points.resize(static_cast<std::size_t>(spec.point_count));
  const Rng point_rng = root.split(std::string_view("points"));
  parallel_for(spec.point_count, [&](Index i) {
    Rng rng = point_rng.split(static_cast<std::uint64_t>(i));
    PointRecord& p = tile.points.points[i];
    p.easting_m = grid.origin_m.x() + rng.uniform() * grid.extent_m.x();
    p.northing_m = grid.origin_m.y() + rng.uniform() * grid.extent_m.y();
    const Point2 at(p.easting_m, p.northing_m);
    p.displacement_mm.resize(static_cast<std::size_t>(spec.epochs));
    for (Index t = 0; t < spec.epochs; ++t) {
      const double noise = spec.noise_sigma > 0.0 ? rng.normal(0.0, spec.noise_sigma) : 0.0;
      const bool missing = spec.dropout > 0.0 && rng.uniform() < spec.dropout;
      p.displacement_mm[t] = missing ? std::nan("") : tile.signal(at, t) + noise;
    }
  });
  return tile;
}

}  // namespace deform
