#include "deform/stgcn.hpp"

#include <cmath>

namespace deform {

using ad::Var;

Index GridGraph::degree(Index node) const {
  Index d = 1;
  for (ad::SparseMatrix::InnerIterator it(adjacency, node); it; ++it) d += it.value() != 0.0;
  return d;
}

GridGraph build_normalized_adjacency(Index height, Index width) {
  if (height < 1 || width < 1 || (height * width > 1 && (height < 2 || width < 2)))
    throw ShapeError("adjacency: grid " + shape_string({height, width}) + " must be at least 2 x 2");
  GridGraph g;
  g.height = height;
  g.width = width;
  const Index n = height * width;
  std::vector<Eigen::Triplet<double>> edges;
  std::vector<double> degree(static_cast<std::size_t>(n), 1.0);
  for (Index r = 0; r < height; ++r)
    for (Index c = 0; c < width; ++c)
      for (Index dr = -1; dr <= 1; ++dr)
        for (Index dc = -1; dc <= 1; ++dc) {
          if (dr == 0 && dc == 0) continue;
          const Index rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= height || cc < 0 || cc >= width) continue;
          edges.emplace_back(r * width + c, rr * width + cc, 1.0);
          degree[r * width + c] += 1.0;
        }
  g.adjacency.resize(n, n);
  g.adjacency.setFromTriplets(edges.begin(), edges.end());

  std::vector<Eigen::Triplet<double>> norm;
  for (const auto& e : edges)
    norm.emplace_back(e.row(), e.col(), 1.0 / std::sqrt(degree[e.row()] * degree[e.col()]));
  for (Index i = 0; i < n; ++i) norm.emplace_back(i, i, 1.0 / degree[i]);
  auto a = std::make_shared<ad::SparseMatrix>(n, n);
  a->setFromTriplets(norm.begin(), norm.end());
  g.normalized = std::move(a);
  return g;
}

Index StgcnConfig::final_time() const {
  return history_length - 2 * static_cast<Index>(hidden.size()) * (kernel - 1);
}

void StgcnConfig::validate() const {
  if (hidden.empty()) throw Error("stgcn: at least one block is required");
  for (Index h : hidden)
    if (h < 1) throw Error("stgcn: hidden widths must be positive");
  if (kernel < 1) throw Error("stgcn: kernel must be positive");
  if (final_time() < 1)
    throw Error("stgcn: history of " + std::to_string(history_length) + " epochs is consumed by " +
                std::to_string(2 * hidden.size()) + " temporal convolutions of size " + std::to_string(kernel));
  if (input_channels != 1 && input_channels != kMultimodalChannels)
    throw Error("stgcn: input_channels must be 1 or 6, got " + std::to_string(input_channels));
}

nlohmann::json StgcnConfig::to_json() const {
  return {{"kind", "stgcn"},           {"hidden", hidden},   {"kernel", kernel},
          {"input_channels", input_channels}, {"history_length", history_length},
          {"height", height},          {"width", width}};
}

StgcnConfig StgcnConfig::from_json(const nlohmann::json& j) {
  StgcnConfig c;
  if (j.contains("hidden")) c.hidden = j.at("hidden").get<std::vector<Index>>();
  c.kernel = j.value("kernel", c.kernel);
  c.input_channels = j.value("input_channels", c.input_channels);
  c.history_length = j.value("history_length", c.history_length);
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  return c;
}

Var temporal_gated_conv(Var x, Var w_in, Var b_in, Var w_out, Var b_out) {
  return ad::glu_time(x, ad::concat({w_in, w_out}, 0), ad::concat({b_in, b_out}, 0));
}

Var graph_conv(Var x, Var w_g, std::shared_ptr<const ad::SparseMatrix> normalized) {
  const ad::Shape s = x.shape();
  if (s.size() != 3) throw ShapeError("graph_conv: expects [C, N, T], got " + shape_string(s));
  Var mixed = ad::reshape(ad::matmul(w_g, ad::reshape(x, {s[0], s[1] * s[2]})), s);
  return ad::graph_propagate(mixed, std::move(normalized));
}

Stgcn::Stgcn(const StgcnConfig& config, std::uint64_t seed)
    : config_(config), graph_(build_normalized_adjacency(config.height, config.width)) {
  config_.validate();
  const Rng root = Rng(seed).split(std::string_view("stgcn-init"));
  auto uniform = [&](const std::string& name, ad::Shape shape, double limit) {
    auto& p = params_.add(name, std::move(shape), true);
    Rng r = root.split(std::string_view(name));
    for (Index i = 0; i < p.value.size(); ++i) p.value[i] = r.uniform(-limit, limit);
  };
  auto conv = [&](const std::string& prefix, Index in, Index out) {
    const double limit = std::sqrt(6.0 / static_cast<double>((in + out) * config_.kernel));
    for (const char* branch : {".in", ".out"}) {
      uniform(prefix + branch + ".w", {out, in, config_.kernel}, limit);
      params_.add(prefix + branch + ".b", {out}, false);
    }
  };
  Index channels = config_.input_channels;
  for (std::size_t b = 0; b < config_.hidden.size(); ++b) {
    const std::string p = "block" + std::to_string(b);
    const Index h = config_.hidden[b];
    conv(p + ".t1", channels, h);
    uniform(p + ".graph.w", {h, h}, std::sqrt(3.0 / static_cast<double>(h)));
    params_.add(p + ".ln.gamma", {h}, false).value.fill(1.0);
    params_.add(p + ".ln.beta", {h}, false);
    conv(p + ".t2", h, h);
    channels = h;
  }
  const Index flat = channels * config_.final_time();
  uniform("fc.w", {flat, 1}, std::sqrt(6.0 / static_cast<double>(flat + 1)));
  params_.add("fc.b", {1}, false);
}

nlohmann::json Stgcn::config_json() const { return config_.to_json(); }

Var Stgcn::glu(ad::Tape& tape, Var x, const std::string& prefix, const ForwardOptions& opt) {
  return temporal_gated_conv(x, bind(tape, prefix + ".in.w", opt), bind(tape, prefix + ".in.b", opt),
                             bind(tape, prefix + ".out.w", opt), bind(tape, prefix + ".out.b", opt));
}

Var Stgcn::forward(ad::Tape& tape, const ad::Tensor& window, const ForwardOptions& opt) {
  const Index L = config_.history_length, C = config_.input_channels;
  const Index H = config_.height, W = config_.width, N = H * W;
  const ad::Shape expected{L, C, H, W};
  if (window.shape() != expected)
    throw ShapeError("stgcn: window " + shape_string(window.shape()) + ", expected " + shape_string(expected));

  Var x = ad::permute3(tape.constant(window.reshaped({L, C, N})), {1, 2, 0});  // [C, N, L]
  for (std::size_t b = 0; b < config_.hidden.size(); ++b) {
    const std::string p = "block" + std::to_string(b);
    Var h = glu(tape, x, p + ".t1", opt);
    // Residual around the graph convolution, then layer norm over channels at each node and time step.
    Var g = graph_conv(h, bind(tape, p + ".graph.w", opt), graph_.normalized);
    Var z = ad::layer_norm_channels(ad::add(h, g), bind(tape, p + ".ln.gamma", opt), bind(tape, p + ".ln.beta", opt), 1);
    x = glu(tape, z, p + ".t2", opt);
  }
  const ad::Shape s = x.shape();
  Var flat = ad::reshape(ad::permute3(x, {1, 0, 2}), {N, s[0] * s[2]});
  Var out = ad::linear(flat, bind(tape, "fc.w", opt), bind(tape, "fc.b", opt));
  return ad::reshape(out, {H, W});
}

}  // namespace deform
