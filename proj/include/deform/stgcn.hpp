#pragma once

// Spatio-temporal graph convolution network on the pixel grid.

#include "deform/model.hpp"

namespace deform {

struct GridGraph {
  Index height = 0;
  Index width = 0;
  ad::SparseMatrix adjacency;  // 0/1 queen adjacency, no self-loops
  std::shared_ptr<const ad::SparseMatrix> normalized;  // D^-1/2 (A + I) D^-1/2

  Index nodes() const { return height * width; }
  /// Degree counting the self-loop.
  Index degree(Index node) const;
};

/// Requires H, W >= 2 (1 x 1 is allowed and yields the isolated-node graph).
GridGraph build_normalized_adjacency(Index height, Index width);

struct StgcnConfig {
  std::vector<Index> hidden{32, 64};  // output width of each block
  Index kernel = 3;
  Index input_channels = kMultimodalChannels;
  Index history_length = 16;
  Index height = 64;
  Index width = 64;

  /// Time steps left after all temporal convolutions.
  Index final_time() const;
  void validate() const;

  nlohmann::json to_json() const;
  static StgcnConfig from_json(const nlohmann::json& j);
};

/// sigmoid(conv(x, w_in, b_in)) * conv(x, w_out, b_out), valid along time.
ad::Var temporal_gated_conv(ad::Var x, ad::Var w_in, ad::Var b_in, ad::Var w_out, ad::Var b_out);

/// x [C, N, T] -> W_g x A along the node axis, for every time step.
ad::Var graph_conv(ad::Var x, ad::Var w_g, std::shared_ptr<const ad::SparseMatrix> normalized);

class Stgcn : public Model {
 public:
  Stgcn(const StgcnConfig& config, std::uint64_t seed);

  std::string kind() const override { return "stgcn"; }
  Index history() const override { return config_.history_length; }
  Index input_channels() const override { return config_.input_channels; }
  Index height() const override { return config_.height; }
  Index width() const override { return config_.width; }
  nlohmann::json config_json() const override;
  const StgcnConfig& config() const { return config_; }
  const GridGraph& graph() const { return graph_; }

  ad::Var forward(ad::Tape& tape, const ad::Tensor& window, const ForwardOptions& opt) override;

 private:
  ad::Var glu(ad::Tape& tape, ad::Var x, const std::string& prefix, const ForwardOptions& opt);

  StgcnConfig config_;
  GridGraph graph_;
};

}  // namespace deform
