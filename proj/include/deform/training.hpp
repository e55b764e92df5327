#pragma once

// Losses, optimizer, schedule, weight averaging and the fit loop.

#include "deform/model.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace deform {

enum class BaseLoss { mae, smooth_l1 };

struct LossWeights {
  BaseLoss base = BaseLoss::mae;
  double rel = 0.1;
  double corr = 0.1;
  double grad = 0.05;
  double smooth_l1_beta = 1.0;
  double rel_epsilon = 1e-6;

  static LossWeights composite() { return {}; }
  static LossWeights mae_only() { return {BaseLoss::mae, 0.0, 0.0, 0.0}; }
  static LossWeights smoothl1_only() { return {BaseLoss::smooth_l1, 0.0, 0.0, 0.0}; }
  /// "composite", "mae_only" or "smoothl1_only".
  static LossWeights preset(std::string_view name);
  void validate() const;
};

// Per-sample losses on H x W maps. `target` is treated as data (no gradient is needed).
ad::Var loss_mae(ad::Var pred, ad::Var target);
ad::Var loss_smooth_l1(ad::Var pred, ad::Var target, double beta = 1.0);
/// sum |pred - target| / (sum |target| + eps)
ad::Var loss_rel(ad::Var pred_mm, ad::Var target_mm, double eps = 1e-6);
/// 1 - Pearson correlation; 1 when either map has zero variance.
ad::Var loss_corr(ad::Var pred, ad::Var target);
/// Mean of the MAE between Sobel-x responses and the MAE between Sobel-y responses (valid region).
ad::Var loss_grad(ad::Var pred_mm, ad::Var target_mm);
ad::Var composite_loss(ad::Var pred_norm, ad::Var target_norm, const NormStats& stats, const LossWeights& w);

const Eigen::Matrix3d& sobel_x();
const Eigen::Matrix3d& sobel_y();

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;  // applied to parameters flagged `decay` (weight matrices)
  double clip_norm = 1.0;
};

class AdamW {
 public:
  AdamW(std::vector<ad::Parameter*> params, const AdamWConfig& config);
  /// One update with learning rate `lr` from the gradients currently stored on the parameters.
  void step(double lr);
  Index steps() const { return steps_; }
  const std::vector<ad::Tensor>& first_moments() const { return m_; }
  const std::vector<ad::Tensor>& second_moments() const { return v_; }

 private:
  std::vector<ad::Parameter*> params_;
  AdamWConfig config_;
  std::vector<ad::Tensor> m_;
  std::vector<ad::Tensor> v_;
  Index steps_ = 0;
};

/// Linear warm-up from 0 over the first `warmup_fraction` of `total` steps, then cosine
/// decay to `final_ratio * peak` at step `total`.
double lr_schedule(Index step, Index total, double peak, double warmup_fraction = 0.05, double final_ratio = 0.01);

/// Rescales all gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping.
double clip_gradients(std::span<ad::Parameter* const> params, double max_norm);

class Ema {
 public:
  Ema(std::span<ad::Parameter* const> params, double decay);
  /// shadow <- d * shadow + (1 - d) * param with d = min(decay, (1 + n) / (10 + n)).
  void update(std::span<ad::Parameter* const> params);
  const std::vector<ad::Tensor>& shadow() const { return shadow_; }
  Index updates() const { return updates_; }
  double decay() const { return decay_; }

 private:
  std::vector<ad::Tensor> shadow_;
  double decay_;
  Index updates_ = 0;
};

class EarlyStopping {
 public:
  explicit EarlyStopping(Index patience) : patience_(patience) {}
  /// Returns true when `loss` improves on the best seen so far.
  bool update(double loss);
  bool should_stop() const { return bad_epochs_ >= patience_; }
  double best() const { return best_; }

 private:
  Index patience_;
  Index bad_epochs_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

struct TrainConfig {
  LossWeights loss;
  AdamWConfig optim;
  Index batch_size = 8;
  Index max_steps = 300;
  Index max_epochs = 200;
  Index patience = 15;
  double ema_decay = 0.999;
  /// Trailing share of the training windows held out for early stopping.
  double holdout_fraction = 0.15;
  std::uint64_t seed = 0;
  bool verbose = false;
};

struct TrainLogRow {
  Index epoch = 0;
  Index step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double holdout_loss = 0.0;
  double holdout_rmse_mm = 0.0;
};

enum class TrainStatus { completed, early_stopped, diverged };
std::string_view train_status_name(TrainStatus s);

struct TrainResult {
  TrainStatus status = TrainStatus::completed;
  std::vector<TrainLogRow> log;
  Index steps = 0;
  Index best_epoch = -1;
  double best_holdout_loss = std::numeric_limits<double>::infinity();
  std::vector<ad::Tensor> best_parameters;  // raw weights at the best epoch
  std::vector<ad::Tensor> best_ema;         // EMA shadow at the best epoch (used for evaluation)
};

/// Trains `model` on the training windows of `samples`. On return the model holds the
/// best EMA weights.
TrainResult fit(Model& model, const SampleSet& samples, const TrainConfig& config);

void write_training_log(const std::vector<TrainLogRow>& log, const std::filesystem::path& path);

/// Copies tensors into the model parameters (same order as ParameterStore::all()).
void load_parameters(Model& model, const std::vector<ad::Tensor>& values);
std::vector<ad::Tensor> snapshot_parameters(const Model& model);

/// Normalized forecasts for each window, computed in parallel.
std::vector<Frame> predict_windows(Model& model, const SampleSet& samples, std::span<const Window> windows);

/// Loss of one window under `weights`, optionally recording gradients into the parameters.
double sample_loss(Model& model, const SampleSet& samples, const Window& window, const LossWeights& weights,
                   const ForwardOptions& opt, double grad_scale);

}  // namespace deform
