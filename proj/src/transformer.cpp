#include "deform/transformer.hpp"

#include <cmath>

namespace deform {

using ad::Var;

void TransformerConfig::validate() const {
  if (patch_size < 1 || height % patch_size != 0 || width % patch_size != 0)
    throw ShapeError("transformer: grid " + shape_string({height, width}) + " not divisible by patch size " +
                     std::to_string(patch_size));
  if (heads < 1 || embed_dim % heads != 0)
    throw Error("transformer: embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                std::to_string(heads));
  if (out_steps < 1) throw Error("transformer: out_steps must be at least 1");
  if (layers < 1 || ffn_multiplier < 1 || history_length < 1) throw Error("transformer: layers, ffn_multiplier and history_length must be positive");
  if (input_channels != 1 && input_channels != kMultimodalChannels)
    throw Error("transformer: input_channels must be 1 or 6, got " + std::to_string(input_channels));
  if (!(dropout >= 0.0 && dropout < 1.0)) throw Error("transformer: dropout must lie in [0, 1)");
}

nlohmann::json TransformerConfig::to_json() const {
  return {{"kind", "transformer"},          {"patch_size", patch_size},
          {"embed_dim", embed_dim},         {"layers", layers},
          {"heads", heads},                 {"ffn_multiplier", ffn_multiplier},
          {"input_channels", input_channels}, {"history_length", history_length},
          {"out_steps", out_steps},         {"dropout", dropout},
          {"height", height},               {"width", width}};
}

TransformerConfig TransformerConfig::from_json(const nlohmann::json& j) {
  TransformerConfig c;
  c.patch_size = j.value("patch_size", c.patch_size);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.ffn_multiplier = j.value("ffn_multiplier", c.ffn_multiplier);
  c.input_channels = j.value("input_channels", c.input_channels);
  c.history_length = j.value("history_length", c.history_length);
  c.out_steps = j.value("out_steps", c.out_steps);
  c.dropout = j.value("dropout", c.dropout);
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  return c;
}

namespace {

struct PatchLayout {
  Index L, C, H, W, P, rows, cols;

  PatchLayout(const ad::Shape& s, Index patch) {
    if (s.size() != 4) throw ShapeError("patchify: expects [L, C, H, W], got " + shape_string(s));
    L = s[0], C = s[1], H = s[2], W = s[3], P = patch;
    if (P < 1 || H % P != 0 || W % P != 0)
      throw ShapeError("patchify: frame " + shape_string({H, W}) + " not divisible by patch size " + std::to_string(P));
    rows = H / P;
    cols = W / P;
  }
  Index tokens() const { return L * rows * cols; }
  Index width() const { return C * P * P; }

  // Calls fn(source index in the frame stack, index in the patch matrix) for every element.
  template <typename F>
  void for_each(F fn) const {
    for (Index t = 0; t < L; ++t)
      for (Index pr = 0; pr < rows; ++pr)
        for (Index pc = 0; pc < cols; ++pc) {
          const Index token = (t * rows + pr) * cols + pc;
          for (Index c = 0; c < C; ++c)
            for (Index py = 0; py < P; ++py)
              for (Index px = 0; px < P; ++px) {
                const Index src = ((t * C + c) * H + pr * P + py) * W + pc * P + px;
                fn(src, token * width() + (c * P + py) * P + px);
              }
        }
  }
};

}  // namespace

ad::Tensor patchify(const ad::Tensor& frames, Index patch) {
  const PatchLayout lay(frames.shape(), patch);
  ad::Tensor out({lay.tokens(), lay.width()});
  lay.for_each([&](Index src, Index dst) { out[dst] = frames[src]; });
  return out;
}

ad::Tensor unpatchify(const ad::Tensor& patches, const ad::Shape& frame_shape, Index patch) {
  const PatchLayout lay(frame_shape, patch);
  if (patches.shape() != ad::Shape{lay.tokens(), lay.width()})
    throw ShapeError("unpatchify: patches " + shape_string(patches.shape()) + " do not match frames " +
                     shape_string(frame_shape));
  ad::Tensor out(frame_shape);
  lay.for_each([&](Index src, Index dst) { out[src] = patches[dst]; });
  return out;
}

std::vector<Index> unpatchify_index(const ad::Shape& frame_shape, Index patch) {
  const PatchLayout lay(frame_shape, patch);
  std::vector<Index> index(static_cast<std::size_t>(ad::shape_size(frame_shape)));
  lay.for_each([&](Index src, Index dst) { index[src] = dst; });
  return index;
}

ad::Tensor attention_mask(Index history_tokens, Index query_tokens) {
  const Index n = history_tokens + query_tokens;
  ad::Tensor m({n, n});
  auto mm = m.matrix();
  mm.block(0, history_tokens, history_tokens, query_tokens).setConstant(ad::kMaskBlocked);
  return m;
}

Transformer::Transformer(const TransformerConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const Index D = config_.embed_dim;
  const Index P2 = config_.patch_size * config_.patch_size;
  const Index Np = config_.patches_per_frame();
  const Index F = config_.ffn_multiplier * D;
  const Rng root = Rng(seed).split(std::string_view("transformer-init"));
  auto rng_for = [&](const std::string& name) { return root.split(std::string_view(name)); };

  auto weight = [&](const std::string& name, Index in, Index out) {
    auto& p = params_.add(name, {in, out}, true);
    Rng r = rng_for(name);
    init_glorot(p, r);
  };
  auto bias = [&](const std::string& name, Index n) { params_.add(name, {n}, false); };
  auto norm = [&](const std::string& prefix) {
    params_.add(prefix + ".gamma", {D}, false).value.fill(1.0);
    params_.add(prefix + ".beta", {D}, false);
  };
  auto table = [&](const std::string& name, Index rows) {
    auto& p = params_.add(name, {rows, D}, false);
    Rng r = rng_for(name);
    init_normal(p, 0.02, r);
  };

  weight("embed.w", config_.input_channels * P2, D);
  bias("embed.b", D);
  norm("embed.ln");
  table("pos.temporal", config_.history_length + config_.out_steps);
  table("pos.spatial", Np);
  table("query", config_.out_steps);
  for (Index l = 0; l < config_.layers; ++l) {
    const std::string b = "block" + std::to_string(l);
    norm(b + ".ln1");
    weight(b + ".attn.qkv.w", D, 3 * D);
    bias(b + ".attn.qkv.b", 3 * D);
    weight(b + ".attn.out.w", D, D);
    bias(b + ".attn.out.b", D);
    norm(b + ".ln2");
    weight(b + ".ffn.w1", D, F);
    bias(b + ".ffn.b1", F);
    weight(b + ".ffn.w2", F, D);
    bias(b + ".ffn.b2", D);
  }
  norm("decoder.ln");
  {
    auto& p = params_.add("decoder.w", {D, P2}, true);
    Rng r = rng_for("decoder.w");
    init_normal(p, 0.01, r);
  }
  bias("decoder.b", P2);

  mask_ = std::make_shared<const ad::Tensor>(
      attention_mask(config_.history_length * Np, config_.out_steps * Np));
  {
    const Index n = config_.tokens(), first = config_.history_length * Np;
    ad::Tensor rows({n - first, n});
    std::copy(mask_->data() + first * n, mask_->data() + n * n, rows.data());
    query_mask_ = std::make_shared<const ad::Tensor>(std::move(rows));
  }
  decode_index_ = std::make_shared<const std::vector<Index>>(
      unpatchify_index({1, 1, config_.height, config_.width}, config_.patch_size));
}

nlohmann::json Transformer::config_json() const { return config_.to_json(); }

void Transformer::zero_decoder() {
  params_.get("decoder.w").value.fill(0.0);
  params_.get("decoder.b").value.fill(0.0);
}

Var Transformer::layer_norm_affine(ad::Tape& tape, Var x, const std::string& prefix, const ForwardOptions& opt) {
  const Index n = x.shape()[0];
  Var y = ad::layer_norm(x);
  y = ad::mul(y, ad::expand_rows(bind(tape, prefix + ".gamma", opt), n));
  return ad::add(y, ad::expand_rows(bind(tape, prefix + ".beta", opt), n));
}

Var Transformer::embed(ad::Tape& tape, const ad::Tensor& window, const ForwardOptions& opt,
                       const ad::Tensor* query_override) {
  const ad::Shape expected{config_.history_length, config_.input_channels, config_.height, config_.width};
  if (window.shape() != expected)
    throw ShapeError("transformer: window " + shape_string(window.shape()) + ", expected " + shape_string(expected));
  const Index Np = config_.patches_per_frame();
  const Index D = config_.embed_dim;
  const Index steps = config_.history_length + config_.out_steps;

  Var patches = tape.constant(patchify(window, config_.patch_size));
  Var e = ad::linear(patches, bind(tape, "embed.w", opt), bind(tape, "embed.b", opt));
  e = layer_norm_affine(tape, e, "embed.ln", opt);

  Var q;
  if (query_override) {
    if (query_override->shape() != ad::Shape{config_.out_steps * Np, D})
      throw ShapeError("transformer: query override " + shape_string(query_override->shape()));
    q = tape.constant(*query_override);
  } else {
    q = ad::repeat_interleave_rows(bind(tape, "query", opt), Np);
  }
  Var pos = ad::add(ad::repeat_interleave_rows(bind(tape, "pos.temporal", opt), Np),
                    ad::tile_rows(bind(tape, "pos.spatial", opt), steps));
  return ad::add(ad::concat({e, q}, 0), pos);
}

Var Transformer::block(ad::Tape& tape, Var z, Index layer, const ForwardOptions& opt, Index first_row) {
  const std::string b = "block" + std::to_string(layer);
  const Index D = config_.embed_dim;
  const Index dk = D / config_.heads;
  const Index n = z.shape()[0];
  const bool drop = opt.training && config_.dropout > 0.0;
  if (drop && !opt.rng) throw Error("transformer: dropout requires a random stream");
  if (first_row != 0 && first_row != config_.history_length * config_.patches_per_frame())
    throw Error("transformer: partial block must start at the first query token");

  Var a = layer_norm_affine(tape, z, b + ".ln1", opt);
  Var qkv = ad::linear(a, bind(tape, b + ".attn.qkv.w", opt), bind(tape, b + ".attn.qkv.b", opt));
  Var q_rows = first_row == 0 ? qkv : ad::slice(qkv, 0, first_row, n - first_row);
  Var z_rows = first_row == 0 ? z : ad::slice(z, 0, first_row, n - first_row);
  const auto& mask = first_row == 0 ? mask_ : query_mask_;
  std::vector<Var> heads;
  for (Index h = 0; h < config_.heads; ++h)
    heads.push_back(ad::scaled_dot_attention(ad::slice(q_rows, 1, h * dk, dk), ad::slice(qkv, 1, D + h * dk, dk),
                                             ad::slice(qkv, 1, 2 * D + h * dk, dk), mask));
  Var attn = ad::linear(ad::concat(heads, 1), bind(tape, b + ".attn.out.w", opt), bind(tape, b + ".attn.out.b", opt));
  if (drop) attn = ad::dropout(attn, config_.dropout, *opt.rng);

  Var f = layer_norm_affine(tape, z_rows, b + ".ln2", opt);
  f = ad::gelu(ad::linear(f, bind(tape, b + ".ffn.w1", opt), bind(tape, b + ".ffn.b1", opt)));
  f = ad::linear(f, bind(tape, b + ".ffn.w2", opt), bind(tape, b + ".ffn.b2", opt));
  if (drop) f = ad::dropout(f, config_.dropout, *opt.rng);
  return ad::add(ad::add(z_rows, attn), f);
}

Var Transformer::encode(ad::Tape& tape, const ad::Tensor& window, const ForwardOptions& opt,
                        const ad::Tensor* query_override) {
  Var z = embed(tape, window, opt, query_override);
  for (Index l = 0; l < config_.layers; ++l) z = block(tape, z, l, opt);
  return z;
}

Var Transformer::forward(ad::Tape& tape, const ad::Tensor& window, const ForwardOptions& opt) {
  const Index Np = config_.patches_per_frame();
  const Index H = config_.height, W = config_.width;
  // Only query tokens reach the decoder, so the last block computes just those rows.
  const Index first_query = config_.history_length * Np;
  Var z = embed(tape, window, opt);
  for (Index l = 0; l + 1 < config_.layers; ++l) z = block(tape, z, l, opt);
  z = block(tape, z, config_.layers - 1, opt, first_query);
  Var q = ad::slice(z, 0, 0, Np);  // first forecast step
  q = layer_norm_affine(tape, q, "decoder.ln", opt);
  Var inc = ad::linear(q, bind(tape, "decoder.w", opt), bind(tape, "decoder.b", opt));
  inc = ad::gather(inc, decode_index_, {H, W});

  // Channel 0 of the last history frame is the last observed normalized displacement.
  auto last = std::make_shared<ad::Tensor>(ad::Shape{H, W});
  const double* src = window.data() + (config_.history_length - 1) * config_.input_channels * H * W;
  std::copy(src, src + H * W, last->data());
  return ad::add_const(inc, last);
}

}  // namespace deform
