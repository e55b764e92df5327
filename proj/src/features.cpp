#include "deform/features.hpp"

#include <cmath>

namespace deform {

Index SplitSpec::train_epochs(Index total_epochs) const {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw Error("split: train_fraction must lie in (0, 1), got " + std::to_string(train_fraction));
  const auto n = static_cast<Index>(std::floor(train_fraction * static_cast<double>(total_epochs)));
  if (n < 2 || n >= total_epochs)
    throw Error("split: " + std::to_string(total_epochs) + " epochs give T_train = " + std::to_string(n) +
                ", need 2 <= T_train < T");
  return n;
}

Index SplitSpec::train_windows(Index total_windows) const {
  return static_cast<Index>(std::floor(train_fraction * static_cast<double>(total_windows)));
}

Matrix harmonic_trend_design(std::span<const double> epoch_days, Index count) {
  Matrix x(count, 5);
  const double t0 = epoch_days[0];
  for (Index i = 0; i < count; ++i) {
    const double days = epoch_days[i] - t0;
    const double years = days / kDaysPerYear;
    x(i, 0) = 1.0;
    x(i, 1) = years;
    x(i, 2) = years * years;
    x(i, 3) = std::sin(kAnnualOmega * days);
    x(i, 4) = std::cos(kAnnualOmega * days);
  }
  return x;
}

Matrix frames_to_columns(const std::vector<Frame>& frames, Index count) {
  const Index pixels = frames.front().size();
  Matrix y(count, pixels);
  for (Index t = 0; t < count; ++t) y.row(t) = Eigen::Map<const Eigen::RowVectorXd>(frames[t].data(), pixels);
  return y;
}

const Frame& StaticMaps::channel(int i) const {
  switch (i) {
    case 0: return velocity;
    case 1: return acceleration;
    default: return seasonal_amplitude;
  }
}

StaticMaps fit_static_indicators(const DisplacementCube& cube, const SplitSpec& split) {
  const Index t_train = split.train_epochs(cube.epochs());
  const Index h = cube.grid.height;
  const Index w = cube.grid.width;
  const Matrix y = frames_to_columns(cube.frames, t_train);
  for (Index p = 0; p < y.cols(); ++p)
    if (!y.col(p).allFinite())
      throw FitError("fit_static_indicators: non-finite displacement at pixel (" + std::to_string(p / w) + ", " +
                     std::to_string(p % w) + ")");
  if (t_train < 6)
    throw FitError("fit_static_indicators: " + std::to_string(t_train) +
                   " training epochs, need at least 6 for 5 coefficients");
  const Matrix x = harmonic_trend_design(cube.calendar.epoch_days(), t_train);
  const Matrix beta = least_squares<double>(x, y, "fit_static_indicators at pixel (0, 0)");

  StaticMaps maps;
  maps.velocity = Eigen::Map<const Frame>(Vector(beta.row(1).transpose()).data(), h, w);
  maps.acceleration = 2.0 * Eigen::Map<const Frame>(Vector(beta.row(2).transpose()).data(), h, w);
  const Eigen::ArrayXd amp = (beta.row(3).array().square() + beta.row(4).array().square()).sqrt().transpose();
  maps.seasonal_amplitude = Eigen::Map<const Frame>(amp.data(), h, w);
  return maps;
}

TemporalEncoding encode_time(const AcquisitionCalendar& calendar) {
  TemporalEncoding enc;
  for (const auto& d : calendar.dates()) {
    const double phi = 2.0 * M_PI * static_cast<double>(day_of_year(d)) / kDaysPerYear;
    enc.sin.push_back(std::sin(phi));
    enc.cos.push_back(std::cos(phi));
  }
  return enc;
}

NormStats compute_norm_stats(const DisplacementCube& cube, const StaticMaps& statics, const SplitSpec& split) {
  const Index t_train = split.train_epochs(cube.epochs());
  NormStats s;
  const Index h = cube.grid.height;
  const Index w = cube.grid.width;
  Frame sum = Frame::Zero(h, w);
  for (Index t = 0; t < t_train; ++t) sum += cube.frames[t];
  s.pixel_mean = sum / static_cast<double>(t_train);
  Frame sq = Frame::Zero(h, w);
  for (Index t = 0; t < t_train; ++t) sq.array() += (cube.frames[t] - s.pixel_mean).array().square();
  s.pixel_std = (sq.array() / static_cast<double>(t_train) + s.epsilon).sqrt().matrix();
  for (int c = 0; c < 3; ++c) {
    const auto& m = statics.channel(c).array();
    const double mean = m.mean();
    s.static_mean[c] = mean;
    s.static_std[c] = std::sqrt((m - mean).square().mean() + s.epsilon);
  }
  return s;
}

Frame denormalize(const Frame& normalized, const NormStats& stats) {
  if (normalized.rows() != stats.pixel_mean.rows() || normalized.cols() != stats.pixel_mean.cols())
    throw ShapeError("denormalize: prediction " + shape_string({normalized.rows(), normalized.cols()}) +
                     " vs stats " + shape_string({stats.pixel_mean.rows(), stats.pixel_mean.cols()}));
  return (normalized.array() * stats.pixel_std.array() + stats.pixel_mean.array()).matrix();
}

Frame normalize_displacement(const Frame& mm, const NormStats& stats) {
  if (mm.rows() != stats.pixel_mean.rows() || mm.cols() != stats.pixel_mean.cols())
    throw ShapeError("normalize: frame " + shape_string({mm.rows(), mm.cols()}) + " vs stats " +
                     shape_string({stats.pixel_mean.rows(), stats.pixel_mean.cols()}));
  return ((mm.array() - stats.pixel_mean.array()) / stats.pixel_std.array()).matrix();
}

MultimodalCube normalize(const DisplacementCube& cube, const StaticMaps& statics, const TemporalEncoding& encoding,
                         const NormStats& stats) {
  const Index T = cube.epochs();
  if (static_cast<Index>(encoding.sin.size()) != T)
    throw ShapeError("normalize: encoding has " + std::to_string(encoding.sin.size()) + " epochs, cube has " +
                     std::to_string(T));
  for (int c = 0; c < 3; ++c)
    if (statics.channel(c).rows() != cube.grid.height || statics.channel(c).cols() != cube.grid.width)
      throw ShapeError("normalize: static map shape does not match grid");
  MultimodalCube mm;
  mm.grid = cube.grid;
  mm.calendar = cube.calendar;
  mm.stats = stats;
  mm.epochs = T;
  const Index n = mm.frame_size();
  mm.values.resize(static_cast<std::size_t>(T * mm.channels * n));

  std::array<Frame, 3> static_norm;
  for (int c = 0; c < 3; ++c)
    static_norm[c] = ((statics.channel(c).array() - stats.static_mean[c]) / stats.static_std[c]).matrix();
  for (Index t = 0; t < T; ++t) {
    auto put = [&](Index c) { return Eigen::Map<Frame>(mm.values.data() + (t * mm.channels + c) * n, cube.grid.height, cube.grid.width); };
    put(0) = normalize_displacement(cube.frames[t], stats);
    for (int c = 0; c < 3; ++c) put(1 + c) = static_norm[c];
    put(4).setConstant(encoding.sin[t]);
    put(5).setConstant(encoding.cos[t]);
  }
  return mm;
}

SampleSet make_windows(std::shared_ptr<const MultimodalCube> cube, std::shared_ptr<const DisplacementCube> truth,
                       Index history, const SplitSpec& split) {
  const Index T = cube->epochs;
  if (T <= history)
    throw Error("make_windows: " + std::to_string(T) + " epochs cannot hold a window of length " +
                std::to_string(history));
  if (T - history < 5)
    throw Error("make_windows: T - L = " + std::to_string(T - history) + " windows, need at least 5");
  SampleSet set;
  set.cube = std::move(cube);
  set.truth = std::move(truth);
  set.history = history;
  for (Index s = 0; s + history < T; ++s) set.windows.push_back({s, s + history});
  set.train_count = split.train_windows(static_cast<Index>(set.windows.size()));
  if (set.train_count < 1 || set.train_count >= static_cast<Index>(set.windows.size()))
    throw Error("make_windows: split leaves an empty train or test set");
  return set;
}

namespace {

FeatureBundle assemble(const DisplacementCube& cube, const SplitSpec& split, Index history, StaticMaps statics,
                       NormStats stats) {
  FeatureBundle b;
  b.statics = std::move(statics);
  b.encoding = encode_time(cube.calendar);
  b.stats = std::move(stats);
  auto truth = std::make_shared<const DisplacementCube>(cube);
  auto mm = std::make_shared<const MultimodalCube>(normalize(cube, b.statics, b.encoding, b.stats));
  b.cube = mm;
  b.truth = truth;
  b.samples = make_windows(mm, truth, history, split);
  return b;
}

}  // namespace

FeatureBundle build_features(const DisplacementCube& cube, const SplitSpec& split, Index history) {
  auto statics = fit_static_indicators(cube, split);
  auto stats = compute_norm_stats(cube, statics, split);
  return assemble(cube, split, history, std::move(statics), std::move(stats));
}

FeatureBundle build_features_with_stats(const DisplacementCube& cube, const SplitSpec& split, Index history,
                                        const NormStats& source_stats) {
  if (source_stats.pixel_mean.rows() != cube.grid.height || source_stats.pixel_mean.cols() != cube.grid.width)
    throw ShapeError("grid mismatch: source statistics are " +
                     shape_string({source_stats.pixel_mean.rows(), source_stats.pixel_mean.cols()}) +
                     ", target grid is " + shape_string({cube.grid.height, cube.grid.width}));
  return assemble(cube, split, history, fit_static_indicators(cube, split), source_stats);
}

}  // namespace deform
