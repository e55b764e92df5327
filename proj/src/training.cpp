#include "deform/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace deform {

using ad::Var;

LossWeights LossWeights::preset(std::string_view name) {
  if (name == "composite") return composite();
  if (name == "mae_only") return mae_only();
  if (name == "smoothl1_only") return smoothl1_only();
  throw Error("unknown loss preset '" + std::string(name) + "' (expected composite, mae_only or smoothl1_only)");
}

void LossWeights::validate() const {
  if (!(rel >= 0.0 && corr >= 0.0 && grad >= 0.0)) throw Error("loss weights must be non-negative");
  if (!(smooth_l1_beta > 0.0)) throw Error("smooth_l1_beta must be positive");
  if (!(rel_epsilon > 0.0)) throw Error("rel_epsilon must be positive");
}

namespace {

void require_same(const char* who, const Var& a, const Var& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(who) + ": prediction " + shape_string(a.shape()) + " vs target " +
                     shape_string(b.shape()));
}

std::shared_ptr<const ad::Tensor> frame_tensor(const Frame& f) {
  return std::make_shared<const ad::Tensor>(ad::Tensor::from_frame(f));
}

}  // namespace

Var loss_mae(Var pred, Var target) {
  require_same("loss_mae", pred, target);
  return ad::mean(ad::abs(ad::sub(pred, target)));
}

Var loss_smooth_l1(Var pred, Var target, double beta) {
  require_same("loss_smooth_l1", pred, target);
  Var diff = ad::sub(pred, target);
  const ad::Tensor& d = diff.value();
  ad::Tensor out(d.shape());
  for (Index i = 0; i < d.size(); ++i) {
    const double a = std::abs(d[i]);
    out[i] = a < beta ? 0.5 * d[i] * d[i] / beta : a - 0.5 * beta;
  }
  Var elem = diff.tape().record(std::move(out), {diff}, [id = diff.id(), beta](ad::Tape& t, Index self) {
    const auto g = t.grad_buffer(self);
    const ad::Tensor& x = t.value(id);
    auto gx = t.grad_buffer(id);
    for (Index i = 0; i < x.size(); ++i)
      gx[i] += g[i] * (std::abs(x[i]) < beta ? x[i] / beta : (x[i] > 0.0 ? 1.0 : -1.0));
  });
  return ad::mean(elem);
}

Var loss_rel(Var pred_mm, Var target_mm, double eps) {
  require_same("loss_rel", pred_mm, target_mm);
  Var num = ad::sum(ad::abs(ad::sub(pred_mm, target_mm)));
  Var den = ad::add_scalar(ad::sum(ad::abs(target_mm)), eps);
  return ad::div(num, den);
}

Var loss_corr(Var pred, Var target) {
  require_same("loss_corr", pred, target);
  const ad::Shape s = pred.shape();
  auto centred = [&](Var x) { return ad::sub(x, ad::expand(ad::mean(x), s)); };
  const auto variance = [](const ad::Tensor& t) { return (t.array() - t.array().mean()).square().sum(); };
  if (variance(pred.value()) == 0.0 || variance(target.value()) == 0.0)
    return pred.tape().constant(ad::Tensor({1}, 1.0));
  Var pc = centred(pred);
  Var tc = centred(target);
  Var cov = ad::sum(ad::mul(pc, tc));
  Var norm = ad::sqrt(ad::mul(ad::sum(ad::square(pc)), ad::sum(ad::square(tc))));
  return ad::add_scalar(ad::scale(ad::div(cov, norm), -1.0), 1.0);
}

const Eigen::Matrix3d& sobel_x() {
  static const Eigen::Matrix3d k = (Eigen::Matrix3d() << -1, 0, 1, -2, 0, 2, -1, 0, 1).finished();
  return k;
}

const Eigen::Matrix3d& sobel_y() {
  static const Eigen::Matrix3d k = sobel_x().transpose();
  return k;
}

Var loss_grad(Var pred_mm, Var target_mm) {
  require_same("loss_grad", pred_mm, target_mm);
  if (pred_mm.value().ndim() != 2 || pred_mm.shape()[0] < 3 || pred_mm.shape()[1] < 3)
    throw ShapeError("loss_grad: maps must be at least 3 x 3, got " + shape_string(pred_mm.shape()));
  Var gx = loss_mae(ad::fixed_kernel_conv2d(pred_mm, sobel_x()), ad::fixed_kernel_conv2d(target_mm, sobel_x()));
  Var gy = loss_mae(ad::fixed_kernel_conv2d(pred_mm, sobel_y()), ad::fixed_kernel_conv2d(target_mm, sobel_y()));
  return ad::scale(ad::add(gx, gy), 0.5);
}

Var composite_loss(Var pred_norm, Var target_norm, const NormStats& stats, const LossWeights& w) {
  Var loss = w.base == BaseLoss::mae ? loss_mae(pred_norm, target_norm)
                                     : loss_smooth_l1(pred_norm, target_norm, w.smooth_l1_beta);
  if (w.rel == 0.0 && w.corr == 0.0 && w.grad == 0.0) return loss;
  const auto sigma = frame_tensor(stats.pixel_std);
  const auto mu = frame_tensor(stats.pixel_mean);
  Var pred_mm = ad::add_const(ad::mul_const(pred_norm, sigma), mu);
  Var target_mm = ad::add_const(ad::mul_const(target_norm, sigma), mu);
  if (w.rel != 0.0) loss = ad::add(loss, ad::scale(loss_rel(pred_mm, target_mm, w.rel_epsilon), w.rel));
  if (w.corr != 0.0) loss = ad::add(loss, ad::scale(loss_corr(pred_norm, target_norm), w.corr));
  if (w.grad != 0.0) loss = ad::add(loss, ad::scale(loss_grad(pred_mm, target_mm), w.grad));
  return loss;
}

AdamW::AdamW(std::vector<ad::Parameter*> params, const AdamWConfig& config)
    : params_(std::move(params)), config_(config) {
  for (auto* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void AdamW::step(double lr) {
  ++steps_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ad::Parameter& p = *params_[i];
    if (p.grad.shape() != p.value.shape()) p.zero_grad();
    auto g = p.grad.array();
    auto m = m_[i].array();
    auto v = v_[i].array();
    m = config_.beta1 * m + (1.0 - config_.beta1) * g;
    v = config_.beta2 * v + (1.0 - config_.beta2) * g.square();
    auto x = p.value.array();
    if (p.decay && config_.weight_decay != 0.0) x *= 1.0 - lr * config_.weight_decay;
    x -= lr * (m / c1) / ((v / c2).sqrt() + config_.eps);
  }
}

double lr_schedule(Index step, Index total, double peak, double warmup_fraction, double final_ratio) {
  if (total <= 0) return peak;
  const Index warmup = std::max<Index>(1, static_cast<Index>(std::llround(warmup_fraction * static_cast<double>(total))));
  const Index s = std::clamp<Index>(step, 0, total);
  if (s <= warmup) return peak * static_cast<double>(s) / static_cast<double>(warmup);
  const double progress = static_cast<double>(s - warmup) / static_cast<double>(std::max<Index>(1, total - warmup));
  const double floor = final_ratio * peak;
  return floor + (peak - floor) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

double clip_gradients(std::span<ad::Parameter* const> params, double max_norm) {
  double sq = 0.0;
  for (auto* p : params)
    if (p->grad.shape() == p->value.shape()) sq += p->grad.array().square().sum();
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (auto* p : params)
      if (p->grad.shape() == p->value.shape()) p->grad.array() *= s;
  }
  return norm;
}

Ema::Ema(std::span<ad::Parameter* const> params, double decay) : decay_(decay) {
  if (!(decay >= 0.0 && decay < 1.0)) throw Error("EMA decay must lie in [0, 1)");
  for (auto* p : params) shadow_.push_back(p->value);
}

void Ema::update(std::span<ad::Parameter* const> params) {
  const double n = static_cast<double>(updates_);
  const double d = std::min(decay_, (1.0 + n) / (10.0 + n));
  for (std::size_t i = 0; i < shadow_.size(); ++i)
    shadow_[i].array() = d * shadow_[i].array() + (1.0 - d) * params[i]->value.array();
  ++updates_;
}

bool EarlyStopping::update(double loss) {
  if (loss < best_) {
    best_ = loss;
    bad_epochs_ = 0;
    return true;
  }
  ++bad_epochs_;
  return false;
}

std::string_view train_status_name(TrainStatus s) {
  switch (s) {
    case TrainStatus::completed: return "completed";
    case TrainStatus::early_stopped: return "early_stopped";
    case TrainStatus::diverged: return "diverged";
  }
  return "completed";
}

void load_parameters(Model& model, const std::vector<ad::Tensor>& values) {
  auto params = model.parameters().all();
  if (params.size() != values.size())
    throw ShapeError("load_parameters: " + std::to_string(values.size()) + " tensors for " +
                     std::to_string(params.size()) + " parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->value.shape() != values[i].shape())
      throw ShapeError("load_parameters: " + params[i]->name + " expects " + shape_string(params[i]->value.shape()) +
                       ", got " + shape_string(values[i].shape()));
    params[i]->value = values[i];
  }
}

std::vector<ad::Tensor> snapshot_parameters(const Model& model) {
  std::vector<ad::Tensor> out;
  for (const auto* p : model.parameters().all()) out.push_back(p->value);
  return out;
}

std::vector<Frame> predict_windows(Model& model, const SampleSet& samples, std::span<const Window> windows) {
  std::vector<Frame> out(windows.size());
  parallel_for(static_cast<Index>(windows.size()), [&](Index i) {
    out[i] = model.predict(window_tensor(*samples.cube, windows[i], samples.history, model.input_channels()));
  });
  return out;
}

double sample_loss(Model& model, const SampleSet& samples, const Window& window, const LossWeights& weights,
                   const ForwardOptions& opt, double grad_scale) {
  ad::Tape tape;
  const MultimodalCube& cube = *samples.cube;
  Var pred = model.forward(tape, window_tensor(cube, window, samples.history, model.input_channels()), opt);
  Var target = tape.constant(ad::Tensor::from_frame(cube.frame(window.target, 0)));
  Var loss = composite_loss(pred, target, cube.stats, weights);
  const double value = loss.value()[0];
  if (opt.grad && std::isfinite(value)) tape.backward(ad::scale(loss, grad_scale));
  return value;
}

namespace {

struct HoldoutScore {
  double loss = 0.0;
  double rmse_mm = 0.0;
};

HoldoutScore score_holdout(Model& model, const SampleSet& samples, std::span<const Window> windows,
                           const LossWeights& weights) {
  std::vector<double> losses(windows.size());
  std::vector<double> sq(windows.size());
  parallel_for(static_cast<Index>(windows.size()), [&](Index i) {
    ad::Tape tape;
    const MultimodalCube& cube = *samples.cube;
    Var pred = model.forward(tape, window_tensor(cube, windows[i], samples.history, model.input_channels()), {});
    Var target = tape.constant(ad::Tensor::from_frame(cube.frame(windows[i].target, 0)));
    losses[i] = composite_loss(pred, target, cube.stats, weights).value()[0];
    const Frame mm = denormalize(pred.value().to_frame(), cube.stats);
    sq[i] = (mm - samples.truth->frames[windows[i].target]).squaredNorm();
  });
  HoldoutScore s;
  const double pixels = static_cast<double>(samples.cube->frame_size());
  for (std::size_t i = 0; i < windows.size(); ++i) {
    s.loss += losses[i];
    s.rmse_mm += sq[i];
  }
  s.loss /= static_cast<double>(windows.size());
  s.rmse_mm = std::sqrt(s.rmse_mm / (pixels * static_cast<double>(windows.size())));
  return s;
}

}  // namespace

TrainResult fit(Model& model, const SampleSet& samples, const TrainConfig& config) {
  config.loss.validate();
  if (config.batch_size < 1) throw Error("fit: batch_size must be positive");
  const auto train_all = samples.train();
  if (train_all.empty()) throw Error("fit: empty training split");
  Index holdout = static_cast<Index>(std::floor(config.holdout_fraction * static_cast<double>(train_all.size())));
  if (train_all.size() > 1) holdout = std::clamp<Index>(holdout, 1, static_cast<Index>(train_all.size()) - 1);
  else holdout = 0;
  const auto train = train_all.first(train_all.size() - holdout);
  const auto held = holdout > 0 ? train_all.last(holdout) : train_all;

  auto params = model.parameters().all();
  AdamW optim(params, config.optim);
  Ema ema(params, config.ema_decay);
  EarlyStopping stopper(config.patience);
  const Rng root(config.seed);
  const Index per_epoch = (static_cast<Index>(train.size()) + config.batch_size - 1) / config.batch_size;
  const Index total_steps = std::min(config.max_steps, config.max_epochs * per_epoch);

  TrainResult result;
  result.best_parameters = snapshot_parameters(model);
  result.best_ema = ema.shadow();
  std::vector<Index> order(train.size());
  Index step = 0;
  for (Index epoch = 0; step < total_steps; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle = root.split(std::string_view("shuffle")).split(static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), shuffle);

    double epoch_loss = 0.0;
    Index epoch_samples = 0;
    double lr = 0.0;
    bool diverged = false;
    for (Index start = 0; start < static_cast<Index>(order.size()) && step < total_steps; start += config.batch_size) {
      const Index end = std::min<Index>(start + config.batch_size, static_cast<Index>(order.size()));
      const std::vector<ad::Tensor> before = snapshot_parameters(model);
      for (auto* p : params) p->zero_grad();
      double batch_loss = 0.0;
      for (Index k = start; k < end; ++k) {
        Rng drop = root.split(std::string_view("dropout")).split(static_cast<std::uint64_t>(step)).split(static_cast<std::uint64_t>(k - start));
        ForwardOptions opt{true, true, &drop};
        batch_loss += sample_loss(model, samples, train[order[k]], config.loss, opt, 1.0 / static_cast<double>(end - start));
      }
      if (!std::isfinite(batch_loss)) {
        load_parameters(model, before);
        diverged = true;
        break;
      }
      clip_gradients(params, config.optim.clip_norm);
      lr = lr_schedule(step + 1, total_steps, config.optim.lr);
      optim.step(lr);
      ema.update(params);
      ++step;
      epoch_loss += batch_loss;
      epoch_samples += end - start;
    }
    if (diverged) {
      result.status = TrainStatus::diverged;
      break;
    }

    // Held-out score with the averaged weights.
    const std::vector<ad::Tensor> raw = snapshot_parameters(model);
    load_parameters(model, ema.shadow());
    const HoldoutScore score = score_holdout(model, samples, held, config.loss);
    load_parameters(model, raw);

    TrainLogRow row{epoch, step, lr, epoch_loss / static_cast<double>(std::max<Index>(1, epoch_samples)), score.loss,
                    score.rmse_mm};
    result.log.push_back(row);
    if (config.verbose)
      std::fprintf(stderr, "epoch %3td step %4td lr %.2e train %.5f holdout %.5f rmse %.4f mm\n", row.epoch, row.step,
                   row.lr, row.train_loss, row.holdout_loss, row.holdout_rmse_mm);
    if (!std::isfinite(score.loss)) {
      result.status = TrainStatus::diverged;
      break;
    }
    if (stopper.update(score.loss)) {
      result.best_epoch = epoch;
      result.best_holdout_loss = score.loss;
      result.best_parameters = raw;
      result.best_ema = ema.shadow();
    }
    if (stopper.should_stop()) {
      result.status = TrainStatus::early_stopped;
      break;
    }
  }
  result.steps = step;
  load_parameters(model, result.best_ema);
  return result;
}

void write_training_log(const std::vector<TrainLogRow>& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "epoch,step,lr,train_loss,holdout_loss,holdout_rmse_mm\n";
  char buf[256];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%td,%td,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.step, r.lr, r.train_loss,
                  r.holdout_loss, r.holdout_rmse_mm);
    out << buf;
  }
}

}  // namespace deform
