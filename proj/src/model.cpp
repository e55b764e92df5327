#include "deform/model.hpp"

#include "deform/stgcn.hpp"
#include "deform/transformer.hpp"

#include <cmath>

namespace deform {

ad::Parameter& ParameterStore::add(const std::string& name, ad::Shape shape, bool decay) {
  for (const auto& p : params_)
    if (p.name == name) throw Error("duplicate parameter name '" + name + "'");
  ad::Parameter p;
  p.name = name;
  p.value = ad::Tensor(std::move(shape));
  p.decay = decay;
  p.zero_grad();
  params_.push_back(std::move(p));
  return params_.back();
}

ad::Parameter& ParameterStore::get(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return p;
  throw Error("no parameter named '" + name + "'");
}

const ad::Parameter& ParameterStore::get(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p;
  throw Error("no parameter named '" + name + "'");
}

std::vector<ad::Parameter*> ParameterStore::all() {
  std::vector<ad::Parameter*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

std::vector<const ad::Parameter*> ParameterStore::all() const {
  std::vector<const ad::Parameter*> out;
  for (const auto& p : params_) out.push_back(&p);
  return out;
}

Index ParameterStore::count() const {
  Index n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void init_glorot(ad::Parameter& p, Rng& rng) {
  const Index fan_in = p.value.dim(0);
  const Index fan_out = p.value.size() / fan_in;
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (Index i = 0; i < p.value.size(); ++i) p.value[i] = rng.uniform(-limit, limit);
}

void init_normal(ad::Parameter& p, double stddev, Rng& rng) {
  for (Index i = 0; i < p.value.size(); ++i) p.value[i] = rng.normal(0.0, stddev);
}

Frame Model::predict(const ad::Tensor& window) {
  ad::Tape tape;
  return forward(tape, window, ForwardOptions{}).value().to_frame();
}

ad::Var Model::bind(ad::Tape& tape, const std::string& name, const ForwardOptions& opt) {
  ad::Parameter& p = params_.get(name);
  return opt.grad ? tape.parameter(p) : tape.constant(p.value);
}

ad::Tensor window_tensor(const MultimodalCube& cube, const Window& window, Index history, Index channels) {
  if (channels < 1 || channels > cube.channels)
    throw ShapeError("window: " + std::to_string(channels) + " channels requested, stack has " +
                     std::to_string(cube.channels));
  if (window.start < 0 || window.start + history > cube.epochs)
    throw ShapeError("window: epochs [" + std::to_string(window.start) + ", " + std::to_string(window.start + history) +
                     ") outside the stack");
  const Index n = cube.frame_size();
  ad::Tensor out({history, channels, cube.grid.height, cube.grid.width});
  for (Index t = 0; t < history; ++t)
    for (Index c = 0; c < channels; ++c)
      std::copy(cube.frame_data(window.start + t, c), cube.frame_data(window.start + t, c) + n,
                out.data() + (t * channels + c) * n);
  return out;
}

std::unique_ptr<Model> make_model(const nlohmann::json& config, std::uint64_t seed) {
  const std::string kind = config.at("kind").get<std::string>();
  if (kind == "transformer") return std::make_unique<Transformer>(TransformerConfig::from_json(config), seed);
  if (kind == "stgcn") return std::make_unique<Stgcn>(StgcnConfig::from_json(config), seed);
  throw Error("unknown model kind '" + kind + "'");
}

}  // namespace deform
