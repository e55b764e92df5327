#include "deform/eval.hpp"

#include "deform/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace deform {

namespace {

constexpr int kSsimRadius = 5;
constexpr double kSsimSigma = 1.5;

std::array<double, 2 * kSsimRadius + 1> gaussian_taps() {
  std::array<double, 2 * kSsimRadius + 1> w{};
  for (int i = -kSsimRadius; i <= kSsimRadius; ++i) w[i + kSsimRadius] = std::exp(-0.5 * i * i / (kSsimSigma * kSsimSigma));
  return w;
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Linear-interpolation quantile of sorted data.
double quantile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace

double ssim(const Frame& a, const Frame& b, double dynamic_range) {
  if (a.rows() != b.rows() || a.cols() != b.cols() || a.size() == 0)
    throw ShapeError("ssim: maps " + shape_string({a.rows(), a.cols()}) + " and " + shape_string({b.rows(), b.cols()}));
  const double c1 = std::pow(0.01 * dynamic_range, 2), c2 = std::pow(0.03 * dynamic_range, 2);
  static const auto taps = gaussian_taps();
  const Index H = a.rows(), W = a.cols();
  double total = 0.0;
  for (Index r = 0; r < H; ++r)
    for (Index c = 0; c < W; ++c) {
      double sw = 0, ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (Index dr = -kSsimRadius; dr <= kSsimRadius; ++dr) {
        const Index rr = r + dr;
        if (rr < 0 || rr >= H) continue;
        for (Index dc = -kSsimRadius; dc <= kSsimRadius; ++dc) {
          const Index cc = c + dc;
          if (cc < 0 || cc >= W) continue;
          const double w = taps[dr + kSsimRadius] * taps[dc + kSsimRadius];
          const double x = a(rr, cc), y = b(rr, cc);
          sw += w;
          ma += w * x;
          mb += w * y;
          saa += w * x * x;
          sbb += w * y * y;
          sab += w * x * y;
        }
      }
      ma /= sw;
      mb /= sw;
      const double va = saa / sw - ma * ma, vb = sbb / sw - mb * mb, cov = sab / sw - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
  return total / static_cast<double>(H * W);
}

double pearson(const Frame& a, const Frame& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols() || a.size() == 0)
    throw ShapeError("pearson: maps " + shape_string({a.rows(), a.cols()}) + " and " + shape_string({b.rows(), b.cols()}));
  const auto x = a.array() - a.mean();
  const auto y = b.array() - b.mean();
  const double sxx = x.square().sum(), syy = y.square().sum();
  if (sxx == 0.0 || syy == 0.0) return a == b ? 1.0 : 0.0;
  return (x * y).sum() / std::sqrt(sxx * syy);
}

double MetricsReport::mean_ssim() const { return mean_of(ssim); }
double MetricsReport::mean_pearson() const { return mean_of(pearson); }

MetricsReport compute_metrics(std::span<const Frame> pred_mm, std::span<const Frame> truth_mm) {
  if (pred_mm.empty()) throw ShapeError("metrics: empty test set");
  if (pred_mm.size() != truth_mm.size())
    throw ShapeError("metrics: " + std::to_string(pred_mm.size()) + " predictions for " + std::to_string(truth_mm.size()) +
                     " truth epochs");
  for (std::size_t t = 0; t < pred_mm.size(); ++t) {
    if (pred_mm[t].rows() != truth_mm[t].rows() || pred_mm[t].cols() != truth_mm[t].cols() || pred_mm[t].size() == 0)
      throw ShapeError("metrics: epoch " + std::to_string(t) + " prediction " +
                       shape_string({pred_mm[t].rows(), pred_mm[t].cols()}) + " vs truth " +
                       shape_string({truth_mm[t].rows(), truth_mm[t].cols()}));
    if (!pred_mm[t].allFinite() || !truth_mm[t].allFinite())
      throw ShapeError("metrics: non-finite values at epoch " + std::to_string(t));
  }

  MetricsReport m;
  m.epochs = static_cast<Index>(pred_mm.size());
  double n = 0, sq = 0, ab = 0, truth_sum = 0;
  for (const auto& f : truth_mm) truth_sum += f.sum();
  for (const auto& f : pred_mm) n += static_cast<double>(f.size());
  m.pixels = static_cast<Index>(n);
  const double truth_mean = truth_sum / n;

  std::array<Index, 3> rel_hits{};
  std::array<Index, 4> abs_hits{};
  double ss_tot = 0;
  Index rel_eligible = 0;
  std::vector<double> abs_truth;
  abs_truth.reserve(static_cast<std::size_t>(n));
  for (std::size_t t = 0; t < pred_mm.size(); ++t) {
    const double* p = pred_mm[t].data();
    const double* y = truth_mm[t].data();
    for (Index i = 0; i < pred_mm[t].size(); ++i) {
      const double e = std::abs(p[i] - y[i]);
      sq += e * e;
      ab += e;
      ss_tot += (y[i] - truth_mean) * (y[i] - truth_mean);
      for (std::size_t k = 0; k < kAbsoluteThresholdsMm.size(); ++k) abs_hits[k] += e < kAbsoluteThresholdsMm[k];
      const double magnitude = std::abs(y[i]);
      abs_truth.push_back(magnitude);
      if (magnitude < kRelativeExclusionMm) {
        ++m.relative_excluded;
        continue;
      }
      ++rel_eligible;
      for (std::size_t k = 0; k < kRelativeThresholds.size(); ++k) rel_hits[k] += e < kRelativeThresholds[k] * magnitude;
    }
  }
  m.rmse_mm = std::sqrt(sq / n);
  m.mae_mm = ab / n;
  m.r2 = ss_tot > 0.0 ? 1.0 - sq / ss_tot : (sq == 0.0 ? 1.0 : 0.0);
  for (std::size_t k = 0; k < kAbsoluteThresholdsMm.size(); ++k) m.acc_abs[k] = 100.0 * static_cast<double>(abs_hits[k]) / n;
  for (std::size_t k = 0; k < kRelativeThresholds.size(); ++k)
    m.acc_rel[k] = rel_eligible > 0 ? 100.0 * static_cast<double>(rel_hits[k]) / static_cast<double>(rel_eligible) : 100.0;

  m.ssim.assign(pred_mm.size(), 0.0);
  m.pearson.assign(pred_mm.size(), 0.0);
  parallel_for(m.epochs, [&](Index t) {
    const double range = truth_mm[t].maxCoeff() - truth_mm[t].minCoeff();
    m.ssim[t] = ssim(pred_mm[t], truth_mm[t], range > 0.0 ? range : 1.0);
    m.pearson[t] = pearson(pred_mm[t], truth_mm[t]);
  });

  // Decile bins of |truth|; the last bin is closed on the right.
  std::vector<double> sorted = abs_truth;
  std::sort(sorted.begin(), sorted.end());
  auto& b = m.binned;
  for (int k = 0; k <= 10; ++k) b.edges_mm.push_back(quantile(sorted, k / 10.0));
  b.mae_mm.assign(10, 0.0);
  b.counts.assign(10, 0);
  std::size_t idx = 0;
  for (std::size_t t = 0; t < pred_mm.size(); ++t) {
    const double* p = pred_mm[t].data();
    const double* y = truth_mm[t].data();
    for (Index i = 0; i < pred_mm[t].size(); ++i, ++idx) {
      const double v = abs_truth[idx];
      const auto bin = std::min<std::ptrdiff_t>(
          9, std::max<std::ptrdiff_t>(0, std::upper_bound(b.edges_mm.begin() + 1, b.edges_mm.end() - 1, v) - (b.edges_mm.begin() + 1)));
      b.mae_mm[bin] += std::abs(p[i] - y[i]);
      ++b.counts[bin];
    }
  }
  for (int k = 0; k < 10; ++k)
    if (b.counts[k] > 0) b.mae_mm[k] /= static_cast<double>(b.counts[k]);
  return m;
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json rel, abs;
  for (std::size_t k = 0; k < kRelativeThresholds.size(); ++k) rel.push_back({{"threshold", kRelativeThresholds[k]}, {"percent", acc_rel[k]}});
  for (std::size_t k = 0; k < kAbsoluteThresholdsMm.size(); ++k) abs.push_back({{"threshold_mm", kAbsoluteThresholdsMm[k]}, {"percent", acc_abs[k]}});
  return {{"rmse_mm", rmse_mm},
          {"mae_mm", mae_mm},
          {"r2", r2},
          {"acc_rel", rel},
          {"acc_abs", abs},
          {"ssim", ssim},
          {"pearson", pearson},
          {"mean_ssim", mean_ssim()},
          {"mean_pearson", mean_pearson()},
          {"binned_mae", {{"edges_mm", binned.edges_mm}, {"mae_mm", binned.mae_mm}, {"counts", binned.counts}}},
          {"relative_excluded", relative_excluded},
          {"epochs", epochs},
          {"pixels", pixels}};
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  MetricsReport m;
  m.rmse_mm = j.at("rmse_mm").get<double>();
  m.mae_mm = j.at("mae_mm").get<double>();
  m.r2 = j.at("r2").get<double>();
  const auto& rel = j.at("acc_rel");
  const auto& abs = j.at("acc_abs");
  if (rel.size() != m.acc_rel.size() || abs.size() != m.acc_abs.size())
    throw ParseError("metrics: unexpected number of accuracy thresholds");
  for (std::size_t k = 0; k < m.acc_rel.size(); ++k) m.acc_rel[k] = rel[k].at("percent").get<double>();
  for (std::size_t k = 0; k < m.acc_abs.size(); ++k) m.acc_abs[k] = abs[k].at("percent").get<double>();
  m.ssim = j.at("ssim").get<std::vector<double>>();
  m.pearson = j.at("pearson").get<std::vector<double>>();
  const auto& b = j.at("binned_mae");
  m.binned.edges_mm = b.at("edges_mm").get<std::vector<double>>();
  m.binned.mae_mm = b.at("mae_mm").get<std::vector<double>>();
  m.binned.counts = b.at("counts").get<std::vector<Index>>();
  m.relative_excluded = j.at("relative_excluded").get<Index>();
  m.epochs = j.at("epochs").get<Index>();
  m.pixels = j.at("pixels").get<Index>();
  return m;
}

Evaluation evaluate_frames(std::vector<Frame> pred_mm, const DisplacementCube& truth, std::vector<Index> epochs) {
  Evaluation e;
  e.epochs = std::move(epochs);
  e.pred_mm = std::move(pred_mm);
  for (Index t : e.epochs) {
    if (t < 0 || t >= truth.epochs()) throw ShapeError("evaluate: epoch " + std::to_string(t) + " outside the cube");
    e.truth_mm.push_back(truth.frames[t]);
  }
  e.metrics = compute_metrics(e.pred_mm, e.truth_mm);
  return e;
}

Evaluation evaluate_model(Model& model, const SampleSet& samples, std::span<const Window> windows, const NormStats& stats) {
  if (windows.empty()) throw ShapeError("evaluate: no windows to evaluate");
  const auto normalized = predict_windows(model, samples, windows);
  std::vector<Frame> pred;
  std::vector<Index> epochs;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    pred.push_back(denormalize(normalized[i], stats));
    epochs.push_back(windows[i].target);
  }
  return evaluate_frames(std::move(pred), *samples.truth, std::move(epochs));
}

Evaluation evaluate_checkpoint(const ModelCheckpoint& ckpt, const DisplacementCube& cube, const SplitSpec& split,
                               bool all_windows) {
  auto model = instantiate(ckpt);
  const FeatureBundle fb = build_features_with_stats(cube, split, model->history(), ckpt.stats);
  const std::span<const Window> windows = all_windows ? std::span<const Window>(fb.samples.windows) : fb.samples.test();
  return evaluate_model(*model, fb.samples, windows, ckpt.stats);
}

Evaluation cross_site_evaluate(const ModelCheckpoint& ckpt, const DisplacementCube& target, const SplitSpec& split) {
  const Index h = ckpt.config.value("height", Index{0}), w = ckpt.config.value("width", Index{0});
  if (target.grid.height != h || target.grid.width != w || ckpt.stats.pixel_mean.rows() != h ||
      ckpt.stats.pixel_mean.cols() != w)
    throw ShapeError("transfer: target grid " + shape_string({target.grid.height, target.grid.width}) +
                     " does not match checkpoint grid " + shape_string({h, w}));
  return evaluate_checkpoint(ckpt, target, split);
}

EventDiagnostics event_centred_diagnostics(std::span<const Frame> pred_mm, std::span<const Frame> truth_mm,
                                           std::span<const Index> epochs, Index half_window) {
  const auto n = static_cast<Index>(truth_mm.size());
  if (static_cast<Index>(pred_mm.size()) != n || static_cast<Index>(epochs.size()) != n)
    throw ShapeError("diagnostics: series lengths differ");
  if (n <= 2 * half_window + 1)
    throw ShapeError("diagnostics: series of " + std::to_string(n) + " epochs is too short for a +-" +
                     std::to_string(half_window) + " window");
  for (Index t = 1; t < n; ++t)
    if (epochs[t] != epochs[t - 1] + 1) throw ShapeError("diagnostics: epochs must be consecutive");

  Index best = 0;
  double best_change = -1.0;
  for (Index t = 0; t + 1 < n; ++t) {
    const double change = (truth_mm[t + 1] - truth_mm[t]).cwiseAbs().mean();
    if (change > best_change) best_change = change, best = t;
  }
  const Index event = best + 1;
  EventDiagnostics d;
  d.event_epoch = epochs[event];

  const Frame step = (truth_mm[event] - truth_mm[event - 1]).cwiseAbs();
  Index r = 0, c = 0;
  const double largest = step.maxCoeff(&r, &c);
  d.pixels.push_back({"largest_step", r, c, {}});
  (step.array() - 0.5 * largest).abs().minCoeff(&r, &c);
  d.pixels.push_back({"step_edge", r, c, {}});
  step.minCoeff(&r, &c);
  d.pixels.push_back({"background", r, c, {}});

  for (Index t = std::max<Index>(0, event - half_window); t <= std::min(n - 1, event + half_window); ++t) {
    d.epochs.push_back(epochs[t]);
    d.mean_abs_error.push_back((pred_mm[t] - truth_mm[t]).cwiseAbs().mean());
    for (auto& p : d.pixels) p.error_mm.push_back(pred_mm[t](p.row, p.col) - truth_mm[t](p.row, p.col));
  }
  return d;
}

namespace {

std::ofstream open_out(const std::filesystem::path& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream out(path, mode);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

void write_metrics_json(const MetricsReport& m, const std::filesystem::path& path) {
  open_out(path) << m.to_json().dump(2) << '\n';
}

MetricsReport read_metrics_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  try {
    return MetricsReport::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

std::string metrics_csv_header() {
  std::string h = "model,rmse_mm,mae_mm,r2";
  for (double t : kAbsoluteThresholdsMm) h += ",acc_" + fmt(t) + "mm";
  for (double p : kRelativeThresholds) h += ",acc_rel_" + fmt(100 * p) + "pct";
  return h + ",mean_ssim,mean_pearson,relative_excluded";
}

std::string metrics_csv_row(const std::string& label, const MetricsReport& m) {
  std::string row = label + "," + fmt(m.rmse_mm) + "," + fmt(m.mae_mm) + "," + fmt(m.r2);
  for (double a : m.acc_abs) row += "," + fmt(a);
  for (double a : m.acc_rel) row += "," + fmt(a);
  return row + "," + fmt(m.mean_ssim()) + "," + fmt(m.mean_pearson()) + "," + std::to_string(m.relative_excluded);
}

void write_metrics_csv(const std::string& label, const MetricsReport& m, const std::filesystem::path& path) {
  open_out(path) << metrics_csv_header() << '\n' << metrics_csv_row(label, m) << '\n';
}

void write_diagnostics_csv(const EventDiagnostics& d, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "# event_epoch=" << d.event_epoch;
  for (const auto& p : d.pixels) out << ' ' << p.role << "=(" << p.row << ',' << p.col << ')';
  out << "\nepoch,offset,mean_abs_error_mm";
  for (const auto& p : d.pixels) out << ',' << p.role << "_error_mm";
  out << '\n';
  for (std::size_t i = 0; i < d.epochs.size(); ++i) {
    out << d.epochs[i] << ',' << d.epochs[i] - d.event_epoch << ',' << fmt(d.mean_abs_error[i]);
    for (const auto& p : d.pixels) out << ',' << fmt(p.error_mm[i]);
    out << '\n';
  }
}

void write_pgm(const Frame& map, double lo, double hi, const std::filesystem::path& path) {
  if (!(hi > lo)) throw Error("pgm: empty value range");
  auto out = open_out(path, std::ios::binary);
  out << "P5\n" << map.cols() << ' ' << map.rows() << "\n255\n";
  std::vector<unsigned char> bytes(static_cast<std::size_t>(map.size()));
  for (Index i = 0; i < map.size(); ++i) {
    const double g = std::round(255.0 * (map.data()[i] - lo) / (hi - lo));
    bytes[i] = static_cast<unsigned char>(std::clamp(g, 0.0, 255.0));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void write_heatmaps(const Evaluation& e, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  double bound = 0.0;
  for (const auto& f : e.truth_mm) bound = std::max(bound, f.cwiseAbs().maxCoeff());
  if (bound == 0.0) bound = 1.0;
  for (std::size_t i = 0; i < e.epochs.size(); ++i) {
    const std::string tag = std::to_string(e.epochs[i]);
    write_pgm(e.truth_mm[i], -bound, bound, dir / ("truth_" + tag + ".pgm"));
    write_pgm(e.pred_mm[i], -bound, bound, dir / ("pred_" + tag + ".pgm"));
    write_pgm(e.pred_mm[i] - e.truth_mm[i], -bound, bound, dir / ("residual_" + tag + ".pgm"));
  }
  open_out(dir / "heatmaps.txt") << "gray = round(255 * (mm - lo) / (hi - lo)), clamped to [0, 255]\nlo_mm " << fmt(-bound)
                                 << "\nhi_mm " << fmt(bound) << '\n';
}

}  // namespace deform
