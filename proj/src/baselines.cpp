#include "deform/baselines.hpp"

#include <cmath>

namespace deform {

Frame PixelRegression::coefficient_map(Index row) const {
  const Vector c = coefficients.row(row).transpose();
  return Eigen::Map<const Frame>(c.data(), height, width);
}

Matrix baseline_design(BaselineKind kind, std::span<const double> days) {
  const Index cols = kind == BaselineKind::linear ? 2 : 4;
  Matrix x(static_cast<Index>(days.size()), cols);
  for (Index i = 0; i < x.rows(); ++i) {
    x(i, 0) = 1.0;
    x(i, 1) = days[i] / kDaysPerYear;
    if (kind == BaselineKind::seasonal) {
      x(i, 2) = std::sin(kAnnualOmega * days[i]);
      x(i, 3) = std::cos(kAnnualOmega * days[i]);
    }
  }
  return x;
}

Frame PixelRegression::evaluate(double days) const {
  const double d[1] = {days};
  const Eigen::RowVectorXd x = baseline_design(kind, d).row(0);
  const Eigen::RowVectorXd v = x * coefficients;
  return Eigen::Map<const Frame>(v.data(), height, width);
}

PixelRegression fit_baseline(BaselineKind kind, const DisplacementCube& cube, const SplitSpec& split) {
  const Index t_train = split.train_epochs(cube.epochs());
  const Index minimum = kind == BaselineKind::linear ? 3 : 5;
  const char* name = kind == BaselineKind::linear ? "linear baseline" : "seasonal baseline";
  if (t_train < minimum)
    throw FitError(std::string(name) + ": " + std::to_string(t_train) + " training epochs, need " +
                   std::to_string(minimum));
  PixelRegression r;
  r.kind = kind;
  r.height = cube.grid.height;
  r.width = cube.grid.width;
  const auto& days = cube.calendar.epoch_days();
  r.coefficients = least_squares<double>(baseline_design(kind, std::span(days).first(t_train)),
                                         frames_to_columns(cube.frames, t_train), name);
  return r;
}

namespace {

std::vector<Frame> fit_predict(BaselineKind kind, const DisplacementCube& cube, const SplitSpec& split,
                               std::span<const Index> targets) {
  const PixelRegression r = fit_baseline(kind, cube, split);
  std::vector<Frame> out;
  for (Index t : targets) {
    if (t < 0 || t >= cube.epochs()) throw ShapeError("baseline: target epoch " + std::to_string(t) + " out of range");
    out.push_back(r.evaluate(cube.calendar.epoch_days()[t]));
  }
  return out;
}

}  // namespace

std::vector<Frame> fit_predict_linear(const DisplacementCube& cube, const SplitSpec& split,
                                      std::span<const Index> target_epochs) {
  return fit_predict(BaselineKind::linear, cube, split, target_epochs);
}

std::vector<Frame> fit_predict_seasonal(const DisplacementCube& cube, const SplitSpec& split,
                                        std::span<const Index> target_epochs) {
  return fit_predict(BaselineKind::seasonal, cube, split, target_epochs);
}

std::vector<Frame> predict_persistence(const DisplacementCube& cube, std::span<const Index> target_epochs) {
  std::vector<Frame> out;
  for (Index t : target_epochs) {
    if (t < 1 || t >= cube.epochs()) throw ShapeError("persistence: target epoch " + std::to_string(t) + " has no predecessor");
    out.push_back(cube.frames[t - 1]);
  }
  return out;
}

std::vector<Index> target_epochs(std::span<const Window> windows) {
  std::vector<Index> out;
  for (const auto& w : windows) out.push_back(w.target);
  return out;
}

}  // namespace deform
