#pragma once

// Shared pieces of the learned forecasters: parameter storage, window
// extraction and the forward interface used by the training loop.

#include "deform/autodiff.hpp"
#include "deform/features.hpp"

#include "json.hpp"

#include <deque>
#include <memory>
#include <string>
#include <vector>

namespace deform {

/// Named parameters with stable addresses.
class ParameterStore {
 public:
  ad::Parameter& add(const std::string& name, ad::Shape shape, bool decay);
  ad::Parameter& get(const std::string& name);
  const ad::Parameter& get(const std::string& name) const;
  std::vector<ad::Parameter*> all();
  std::vector<const ad::Parameter*> all() const;
  Index count() const;  // total scalar entries
  Index size() const { return static_cast<Index>(params_.size()); }

 private:
  std::deque<ad::Parameter> params_;
};

/// Glorot-uniform fill for a [fan_in, fan_out] weight.
void init_glorot(ad::Parameter& p, Rng& rng);
void init_normal(ad::Parameter& p, double stddev, Rng& rng);

struct ForwardOptions {
  bool training = false;  // enables dropout
  bool grad = false;      // bind parameters as differentiable leaves
  Rng* rng = nullptr;     // dropout stream, required when training with dropout
};

class Model {
 public:
  virtual ~Model() = default;

  virtual std::string kind() const = 0;
  virtual Index history() const = 0;
  /// 6 for the multimodal stack, 1 for displacement only.
  virtual Index input_channels() const = 0;
  virtual Index height() const = 0;
  virtual Index width() const = 0;
  virtual nlohmann::json config_json() const = 0;

  /// Normalized H x W forecast for the epoch after `window` ([L, C, H, W]).
  virtual ad::Var forward(ad::Tape& tape, const ad::Tensor& window, const ForwardOptions& opt) = 0;

  /// Inference without gradients.
  Frame predict(const ad::Tensor& window);

  ParameterStore& parameters() { return params_; }
  const ParameterStore& parameters() const { return params_; }

 protected:
  ad::Var bind(ad::Tape& tape, const std::string& name, const ForwardOptions& opt);
  ParameterStore params_;
};

/// [L, C, H, W] slice of the normalized stack for `window`, keeping the first `channels` channels.
ad::Tensor window_tensor(const MultimodalCube& cube, const Window& window, Index history, Index channels);

/// Builds a model from its serialized config (the `kind` field selects the class).
/// Parameters are initialized from `seed`.
std::unique_ptr<Model> make_model(const nlohmann::json& config, std::uint64_t seed);

}  // namespace deform
