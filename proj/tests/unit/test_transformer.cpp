#include "doctest.h"

#include "deform/transformer.hpp"

#include <cmath>

using namespace deform;
using namespace deform::ad;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.normal();
  return t;
}

TransformerConfig micro(Index channels = 6) {
  TransformerConfig c;
  c.height = 16;
  c.width = 16;
  c.patch_size = 4;
  c.embed_dim = 16;
  c.layers = 2;
  c.heads = 2;
  c.ffn_multiplier = 2;
  c.history_length = 3;
  c.input_channels = channels;
  c.dropout = 0.0;
  return c;
}

Tensor window_for(const TransformerConfig& c, std::uint64_t seed) {
  return random_tensor({c.history_length, c.input_channels, c.height, c.width}, seed);
}

}  // namespace

TEST_CASE("patch counts") {
  TransformerConfig c;
  c.height = c.width = 64;
  c.patch_size = 8;
  CHECK(c.patches_per_frame() == 64);
  CHECK(c.tokens() == 17 * 64);
  const Tensor x = random_tensor({2, 3, 64, 64}, 1);
  const Tensor p = patchify(x, 8);
  CHECK(p.shape() == Shape{2 * 64, 3 * 64});
}

TEST_CASE("patchify order and round trip") {
  const Tensor x = random_tensor({3, 2, 8, 12}, 2);
  const Tensor p = patchify(x, 4);
  REQUIRE(p.shape() == Shape{3 * 6, 2 * 16});
  // brute-force index check: time-major, then patch row, then patch column; channel, row, col inside
  for (Index t = 0; t < 3; ++t)
    for (Index pr = 0; pr < 2; ++pr)
      for (Index pc = 0; pc < 3; ++pc)
        for (Index c = 0; c < 2; ++c)
          for (Index i = 0; i < 4; ++i)
            for (Index j = 0; j < 4; ++j) {
              const Index row = (t * 2 + pr) * 3 + pc;
              const Index col = (c * 4 + i) * 4 + j;
              const Index src = ((t * 2 + c) * 8 + pr * 4 + i) * 12 + pc * 4 + j;
              REQUIRE(p[row * 32 + col] == x[src]);
            }
  const Tensor back = unpatchify(p, x.shape(), 4);
  CHECK(back.to_vector() == x.to_vector());
}

TEST_CASE("one patch covering the frame is the flattened frame") {
  const Tensor x = random_tensor({2, 1, 4, 4}, 3);
  const Tensor p = patchify(x, 4);
  CHECK(p.shape() == Shape{2, 16});
  CHECK(p.to_vector() == x.to_vector());
}

TEST_CASE("indivisible grids are rejected") {
  const Tensor x = random_tensor({1, 1, 10, 8}, 3);
  CHECK_THROWS_AS(patchify(x, 4), ShapeError);
  TransformerConfig c = micro();
  c.height = 18;
  CHECK_THROWS(c.validate());
  c = micro();
  c.embed_dim = 15;
  CHECK_THROWS(c.validate());
  c = micro();
  c.out_steps = 0;
  CHECK_THROWS(c.validate());
}

TEST_CASE("attention mask blocks history rows from query columns only") {
  const Tensor m = attention_mask(6, 3);
  REQUIRE(m.shape() == Shape{9, 9});
  for (Index r = 0; r < 9; ++r)
    for (Index c = 0; c < 9; ++c) {
      const bool blocked = r < 6 && c >= 6;
      CHECK(m[r * 9 + c] == (blocked ? kMaskBlocked : 0.0));
    }
}

TEST_CASE("embedding shape and temporal positional term") {
  const auto cfg = micro();
  Transformer model(cfg, 7);
  Tensor w = window_for(cfg, 4);
  // frames 0 and 2 identical
  const Index frame = cfg.input_channels * cfg.height * cfg.width;
  std::copy(w.data(), w.data() + frame, w.data() + 2 * frame);
  Tape tape;
  Var e = model.embed(tape, w, {});
  const Index Np = cfg.patches_per_frame(), D = cfg.embed_dim;
  REQUIRE(e.shape() == Shape{(cfg.history_length + cfg.out_steps) * Np, D});
  const auto& temporal = model.parameters().get("pos.temporal").value;
  for (Index p = 0; p < Np; ++p)
    for (Index d = 0; d < D; ++d) {
      const double diff = e.value()[(2 * Np + p) * D + d] - e.value()[p * D + d];
      const double expected = temporal[2 * D + d] - temporal[d];
      CHECK(diff == doctest::Approx(expected).epsilon(1e-12).scale(1.0));
    }

  Tape t2;
  Var z = model.embed(t2, Tensor(w.shape()), {});
  CHECK(z.value().array().allFinite());
}

TEST_CASE("history tokens ignore query content") {
  const auto cfg = micro();
  Transformer model(cfg, 11);
  const Tensor w = window_for(cfg, 5);
  const Index Np = cfg.patches_per_frame(), D = cfg.embed_dim;
  const Tensor q1 = random_tensor({cfg.out_steps * Np, D}, 1);
  Tensor q2 = random_tensor({cfg.out_steps * Np, D}, 2);
  for (Index i = 0; i < q2.size(); ++i) q2[i] *= 1000.0;
  Tape a, b;
  Var za = model.encode(a, w, {}, &q1);
  Var zb = model.encode(b, w, {}, &q2);
  const Index hist = cfg.history_length * Np * D;
  for (Index i = 0; i < hist; ++i) REQUIRE(za.value()[i] == zb.value()[i]);
  bool query_changed = false;
  for (Index i = hist; i < za.value().size(); ++i) query_changed |= za.value()[i] != zb.value()[i];
  CHECK(query_changed);
}

TEST_CASE("diagonal attention returns the value rows") {
  const Tensor q = random_tensor({4, 3}, 1), k = random_tensor({4, 3}, 2), v = random_tensor({4, 5}, 3);
  auto mask = std::make_shared<Tensor>(Shape{4, 4}, kMaskBlocked);
  for (Index i = 0; i < 4; ++i) (*mask)[i * 4 + i] = 0.0;
  Tape t;
  Var y = scaled_dot_attention(t.constant(q), t.constant(k), t.constant(v), mask);
  CHECK(y.value().to_vector() == v.to_vector());
}

TEST_CASE("swapping two patches with their positional rows swaps the outputs") {
  const auto cfg = micro();
  Transformer model(cfg, 3);
  const Tensor w = window_for(cfg, 8);
  const Index Np = cfg.patches_per_frame(), D = cfg.embed_dim, P = cfg.patch_size;
  Tape a;
  const Tensor za = model.encode(a, w, {}).value();

  // swap patch 0 (top-left) and patch 5 (row 1, column 1) in every frame and channel
  Tensor ws = w;
  const Index grid = cfg.width / P;
  auto origin = [&](Index patch) { return std::pair<Index, Index>{(patch / grid) * P, (patch % grid) * P}; };
  const auto [r0, c0] = origin(0);
  const auto [r1, c1] = origin(5);
  for (Index t = 0; t < cfg.history_length; ++t)
    for (Index c = 0; c < cfg.input_channels; ++c)
      for (Index i = 0; i < P; ++i)
        for (Index j = 0; j < P; ++j) {
          const Index base = (t * cfg.input_channels + c) * cfg.height * cfg.width;
          std::swap(ws[base + (r0 + i) * cfg.width + c0 + j], ws[base + (r1 + i) * cfg.width + c1 + j]);
        }
  auto& spatial = model.parameters().get("pos.spatial").value;
  for (Index d = 0; d < D; ++d) std::swap(spatial[0 * D + d], spatial[5 * D + d]);
  Tape b;
  const Tensor zb = model.encode(b, ws, {}).value();
  const Index steps = cfg.history_length + cfg.out_steps;
  for (Index s = 0; s < steps; ++s)
    for (Index p = 0; p < Np; ++p) {
      const Index src = p == 0 ? 5 : (p == 5 ? 0 : p);
      for (Index d = 0; d < D; ++d)
        REQUIRE(std::abs(zb[(s * Np + p) * D + d] - za[(s * Np + src) * D + d]) < 1e-10);
    }
}

TEST_CASE("zeroed decoder is exact persistence") {
  for (Index channels : {1, 6}) {
    const auto cfg = micro(channels);
    Transformer model(cfg, 2);
    model.zero_decoder();
    const Tensor w = window_for(cfg, 9);
    const Frame pred = model.predict(w);
    const Index HW = cfg.height * cfg.width;
    const double* last = w.data() + (cfg.history_length - 1) * channels * HW;
    REQUIRE(pred.rows() == cfg.height);
    REQUIRE(pred.cols() == cfg.width);
    for (Index i = 0; i < HW; ++i) REQUIRE(pred.data()[i] == last[i]);
  }
}

TEST_CASE("forward output is finite with the right shape") {
  const auto cfg = micro();
  Transformer model(cfg, 4);
  const Frame pred = model.predict(window_for(cfg, 1));
  CHECK(pred.rows() == 16);
  CHECK(pred.cols() == 16);
  CHECK(pred.allFinite());
  CHECK_THROWS_AS(model.predict(random_tensor({3, 6, 8, 8}, 1)), ShapeError);
}

TEST_CASE("pruned last block matches the full encoder on query rows") {
  const auto cfg = micro();
  Transformer model(cfg, 6);
  const Tensor w = window_for(cfg, 12);
  Tape a;
  const Tensor z = model.encode(a, w, {}).value();
  const Index Np = cfg.patches_per_frame(), D = cfg.embed_dim;
  // Decode the full-encoder query rows by hand and compare with forward().
  Tape b;
  Var q = b.constant(Tensor({Np, D}, std::vector<double>(z.data() + cfg.history_length * Np * D,
                                                         z.data() + (cfg.history_length + 1) * Np * D)));
  auto& p = model.parameters();
  Var n = layer_norm(q);
  n = add(mul(n, expand_rows(b.constant(p.get("decoder.ln.gamma").value), Np)),
          expand_rows(b.constant(p.get("decoder.ln.beta").value), Np));
  Var inc = linear(n, b.constant(p.get("decoder.w").value), b.constant(p.get("decoder.b").value));
  const Tensor frame = unpatchify(inc.value(), {1, 1, cfg.height, cfg.width}, cfg.patch_size);
  const Frame pred = model.predict(w);
  const double* last = w.data() + (cfg.history_length - 1) * cfg.input_channels * cfg.height * cfg.width;
  for (Index i = 0; i < frame.size(); ++i) CHECK(pred.data()[i] == doctest::Approx(last[i] + frame[i]).epsilon(1e-12));
}

TEST_CASE("full model gradient check on the micro config") {
  const auto cfg = micro();
  Transformer model(cfg, 21);
  const Tensor w = window_for(cfg, 13);
  const Tensor target = random_tensor({cfg.height, cfg.width}, 14);
  auto params = model.parameters().all();
  const double err = grad_check_parameters(
      params,
      [&](Tape& t) {
        ForwardOptions opt;
        opt.grad = true;
        Var pred = model.forward(t, w, opt);
        return mean(square(sub(pred, t.constant(target))));
      },
      1e-5, 6);
  CHECK(err <= 1e-3);
}

TEST_CASE("config json round trip") {
  auto cfg = micro(1);
  cfg.dropout = 0.25;
  const auto back = TransformerConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  Transformer model(cfg, 1);
  CHECK(model.config_json()["kind"] == "transformer");
}

TEST_CASE("parameter initialization is seeded") {
  Transformer a(micro(), 5), b(micro(), 5), c(micro(), 6);
  const auto& pa = a.parameters().get("embed.w").value;
  CHECK(pa.to_vector() == b.parameters().get("embed.w").value.to_vector());
  CHECK(pa.to_vector() != c.parameters().get("embed.w").value.to_vector());
}
