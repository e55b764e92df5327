#pragma once

// Patch-token Transformer that forecasts a correction to the last observed map.

#include "deform/model.hpp"

namespace deform {

struct TransformerConfig {
  Index patch_size = 8;
  Index embed_dim = 128;
  Index layers = 4;
  Index heads = 4;
  Index ffn_multiplier = 4;
  Index input_channels = kMultimodalChannels;
  Index history_length = 16;
  Index out_steps = 1;
  double dropout = 0.1;
  Index height = 64;
  Index width = 64;

  Index patches_per_frame() const { return (height / patch_size) * (width / patch_size); }
  Index tokens() const { return (history_length + out_steps) * patches_per_frame(); }
  /// Throws ShapeError / Error describing the first violated invariant.
  void validate() const;

  nlohmann::json to_json() const;
  static TransformerConfig from_json(const nlohmann::json& j);
};

/// [L, C, H, W] -> [L * N_p, C * P * P]; rows ordered by time, patch row, patch column;
/// each row lists channel, then pixel row, then pixel column within the patch.
ad::Tensor patchify(const ad::Tensor& frames, Index patch);
/// Exact inverse of patchify for the given frame-stack shape.
ad::Tensor unpatchify(const ad::Tensor& patches, const ad::Shape& frame_shape, Index patch);
/// Flat source index in a patch matrix for every element of the [L, C, H, W] stack.
std::vector<Index> unpatchify_index(const ad::Shape& frame_shape, Index patch);

/// Additive mask over (L + L_out) * N_p tokens: rows of history tokens are blocked
/// from columns of query tokens; everything else is open.
ad::Tensor attention_mask(Index history_tokens, Index query_tokens);

class Transformer : public Model {
 public:
  Transformer(const TransformerConfig& config, std::uint64_t seed);

  std::string kind() const override { return "transformer"; }
  Index history() const override { return config_.history_length; }
  Index input_channels() const override { return config_.input_channels; }
  Index height() const override { return config_.height; }
  Index width() const override { return config_.width; }
  nlohmann::json config_json() const override;
  const TransformerConfig& config() const { return config_; }

  ad::Var forward(ad::Tape& tape, const ad::Tensor& window, const ForwardOptions& opt) override;

  /// Token states after the encoder; `query_override` replaces the initial query
  /// tokens (before positional encoding) when given. Used to check causality.
  ad::Var encode(ad::Tape& tape, const ad::Tensor& window, const ForwardOptions& opt,
                 const ad::Tensor* query_override = nullptr);

  /// Embedded tokens (history and query) with positional encodings, before the blocks.
  ad::Var embed(ad::Tape& tape, const ad::Tensor& window, const ForwardOptions& opt,
                const ad::Tensor* query_override = nullptr);

  /// Zeroes the decoder weights and bias, making the model a persistence forecaster.
  void zero_decoder();

 private:
  /// One encoder block. Rows before `first_row` still serve as keys and values but
  /// their own outputs are not computed; the result holds rows [first_row, n).
  ad::Var block(ad::Tape& tape, ad::Var z, Index layer, const ForwardOptions& opt, Index first_row = 0);
  ad::Var layer_norm_affine(ad::Tape& tape, ad::Var x, const std::string& prefix, const ForwardOptions& opt);

  TransformerConfig config_;
  std::shared_ptr<const ad::Tensor> mask_;
  std::shared_ptr<const ad::Tensor> query_mask_;  // mask rows of the query tokens
  std::shared_ptr<const std::vector<Index>> decode_index_;
};

}  // namespace deform
