#include "doctest.h"

#include "deform/synth.hpp"
#include "deform/training.hpp"
#include "deform/transformer.hpp"
#include "support.hpp"

#include <cmath>

using namespace deform;
using namespace deform::ad;

namespace {

Tensor map2(Index h, Index w, std::vector<double> v) { return Tensor({h, w}, std::move(v)); }

Tensor random_map(Index h, Index w, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Tensor t({h, w});
  for (Index i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
  return t;
}

double eval_loss(const std::function<Var(Var, Var)>& f, const Tensor& a, const Tensor& b) {
  Tape tape;
  return f(tape.constant(a), tape.constant(b)).value()[0];
}

// Sobel response on the valid region, written out as a plain loop.
std::vector<double> sobel_naive(const Tensor& m, bool x) {
  const Index h = m.dim(0), w = m.dim(1);
  std::vector<double> out;
  for (Index r = 1; r + 1 < h; ++r)
    for (Index c = 1; c + 1 < w; ++c) {
      auto at = [&](Index dr, Index dc) { return m[(r + dr) * w + c + dc]; };
      out.push_back(x ? (at(-1, 1) + 2 * at(0, 1) + at(1, 1)) - (at(-1, -1) + 2 * at(0, -1) + at(1, -1))
                      : (at(1, -1) + 2 * at(1, 0) + at(1, 1)) - (at(-1, -1) + 2 * at(-1, 0) + at(-1, 1)));
    }
  return out;
}

NormStats unit_stats(Index h, Index w) {
  NormStats s;
  s.pixel_mean = Frame::Zero(h, w);
  s.pixel_std = Frame::Ones(h, w);
  return s;
}

struct TinyRun {
  FeatureBundle features;
  TransformerConfig config;
};

TinyRun tiny_run() {
  RegimeSpec spec = RegimeSpec::preset(Regime::mixed);
  spec.height = 16;
  spec.width = 16;
  spec.epochs = 40;
  spec.point_count = 400;
  spec.seed = 3;
  const auto tile = generate_tile(spec);
  TinyRun run;
  run.features = build_features(tile.truth, SplitSpec{}, 4);
  run.config.height = 16;
  run.config.width = 16;
  run.config.patch_size = 4;
  run.config.embed_dim = 16;
  run.config.layers = 1;
  run.config.heads = 2;
  run.config.ffn_multiplier = 2;
  run.config.history_length = 4;
  run.config.input_channels = 6;
  run.config.dropout = 0.1;
  return run;
}

TrainConfig tiny_train(Index steps) {
  TrainConfig t;
  t.batch_size = 4;
  t.max_steps = steps;
  t.optim.lr = 3e-3;
  t.seed = 5;
  return t;
}

}  // namespace

TEST_CASE("mae and smooth l1 by hand") {
  const Tensor p = map2(2, 2, {1, 2, 3, 4});
  const Tensor t = map2(2, 2, {0, 0, 0, 8});
  CHECK(eval_loss([](Var a, Var b) { return loss_mae(a, b); }, p, t) == doctest::Approx(2.5).epsilon(1e-15));
  const Tensor q = map2(1, 2, {0.5, 2.0});
  const Tensor z = map2(1, 2, {0.0, 0.0});
  // 0.5 * 0.25 and 2 - 0.5
  CHECK(eval_loss([](Var a, Var b) { return loss_smooth_l1(a, b, 1.0); }, q, z) ==
        doctest::Approx((0.125 + 1.5) / 2).epsilon(1e-15));
}

TEST_CASE("relative loss by hand") {
  const Tensor p = map2(2, 2, {1, 2, 3, 4});
  const Tensor t = map2(2, 2, {2, 2, 2, 2});
  CHECK(eval_loss([](Var a, Var b) { return loss_rel(a, b, 0.0); }, p, t) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(eval_loss([](Var a, Var b) { return loss_rel(a, b, 1e-6); }, p, p) == 0.0);
}

TEST_CASE("correlation loss limits") {
  const Tensor t = random_map(5, 6, 1);
  Tensor neg = t;
  neg.array() *= -1.0;
  Tensor affine = t;
  affine.array() = 3.0 * affine.array() + 1.0;
  const auto corr = [](Var a, Var b) { return loss_corr(a, b); };
  CHECK(eval_loss(corr, neg, t) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(std::abs(eval_loss(corr, affine, t)) < 1e-12);
  CHECK(eval_loss(corr, Tensor({5, 6}, 2.0), t) == 1.0);
}

TEST_CASE("gradient loss by hand and against a loop") {
  CHECK(sobel_x()(0, 0) == -1.0);
  CHECK(sobel_x()(1, 2) == 2.0);
  CHECK(sobel_y() == sobel_x().transpose());

  // ramp along columns: x response 8 on the single valid pixel, y response 0
  const Tensor ramp = map2(3, 3, {0, 1, 2, 0, 1, 2, 0, 1, 2});
  const Tensor zero({3, 3});
  const auto grad = [](Var a, Var b) { return loss_grad(a, b); };
  CHECK(eval_loss(grad, ramp, zero) == doctest::Approx(4.0).epsilon(1e-15));

  const Tensor p = random_map(6, 7, 2), t = random_map(6, 7, 3);
  Tensor d = p;
  d.array() -= t.array();
  double ex = 0.0, ey = 0.0;
  for (double v : sobel_naive(d, true)) ex += std::abs(v);
  for (double v : sobel_naive(d, false)) ey += std::abs(v);
  const double n = 4.0 * 5.0;
  CHECK(eval_loss(grad, p, t) == doctest::Approx(0.5 * (ex / n + ey / n)).epsilon(1e-12));

  CHECK_THROWS_AS(eval_loss(grad, Tensor({2, 5}), Tensor({2, 5})), ShapeError);
}

TEST_CASE("composite loss terms") {
  const Tensor p = random_map(5, 5, 4), t = random_map(5, 5, 5);
  const NormStats unit = unit_stats(5, 5);
  const auto with = [&](LossWeights w) {
    return eval_loss([&](Var a, Var b) { return composite_loss(a, b, unit, w); }, p, t);
  };
  const double mae = eval_loss([](Var a, Var b) { return loss_mae(a, b); }, p, t);
  CHECK(with(LossWeights::mae_only()) == mae);
  const double rel = eval_loss([](Var a, Var b) { return loss_rel(a, b, 1e-6); }, p, t);
  const double corr = eval_loss([](Var a, Var b) { return loss_corr(a, b); }, p, t);
  const double grad = eval_loss([](Var a, Var b) { return loss_grad(a, b); }, p, t);
  CHECK(with(LossWeights::composite()) == doctest::Approx(mae + 0.1 * rel + 0.1 * corr + 0.05 * grad).epsilon(1e-13));

  // relative and gradient terms are taken in millimetres
  NormStats scaled = unit;
  scaled.pixel_std.setConstant(2.0);
  scaled.pixel_mean.setConstant(7.0);
  LossWeights g{BaseLoss::mae, 0.0, 0.0, 1.0};
  const double scaled_grad =
      eval_loss([&](Var a, Var b) { return composite_loss(a, b, scaled, g); }, p, t) - mae;
  CHECK(scaled_grad == doctest::Approx(2.0 * grad).epsilon(1e-12));

  CHECK_THROWS(LossWeights::preset("l2"));
  CHECK(LossWeights::preset("smoothl1_only").base == BaseLoss::smooth_l1);
}

TEST_CASE("composite loss gradient matches finite differences") {
  const Tensor t = random_map(6, 6, 8);
  NormStats s = unit_stats(6, 6);
  s.pixel_std.setConstant(1.5);
  Tensor x = random_map(6, 6, 9, 2.0);
  const double err = grad_check(
      [&](Tape& tape, Var v) { return composite_loss(v, tape.constant(t), s, LossWeights::composite()); }, x);
  CHECK(err <= 1e-4);
}

TEST_CASE("learning rate schedule") {
  const double peak = 2e-3;
  CHECK(lr_schedule(0, 100, peak) == 0.0);
  CHECK(lr_schedule(5, 100, peak) == doctest::Approx(peak));
  CHECK(lr_schedule(2, 100, peak) == doctest::Approx(0.4 * peak));
  CHECK(lr_schedule(100, 100, peak) == doctest::Approx(0.01 * peak));
  CHECK(lr_schedule(500, 100, peak) == doctest::Approx(0.01 * peak));
  // halfway through the decay the cosine sits at the midpoint
  const double mid = lr_schedule(5 + 95 / 2, 100, peak, 0.05, 0.01);
  const double progress = 47.0 / 95.0;
  CHECK(mid == doctest::Approx(0.01 * peak + 0.99 * peak * 0.5 * (1 + std::cos(M_PI * progress))));
  double prev = peak;
  for (Index s = 6; s <= 100; ++s) {
    const double lr = lr_schedule(s, 100, peak);
    CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("gradient clipping") {
  Parameter a{"a", Tensor({2}, 0.0), Tensor({2}, std::vector<double>{6.0, 0.0})};
  Parameter b{"b", Tensor({1}, 0.0), Tensor({1}, std::vector<double>{8.0})};
  std::vector<Parameter*> ps{&a, &b};
  CHECK(clip_gradients(ps, 1.0) == doctest::Approx(10.0));
  CHECK(a.grad[0] == doctest::Approx(0.6));
  CHECK(b.grad[0] == doctest::Approx(0.8));
  CHECK(clip_gradients(ps, 5.0) == doctest::Approx(1.0));
  CHECK(b.grad[0] == doctest::Approx(0.8));
}

TEST_CASE("ema") {
  Parameter p{"p", Tensor({3}, 1.0), Tensor()};
  std::vector<Parameter*> ps{&p};
  Ema none(ps, 0.0);
  p.value.fill(4.0);
  none.update(ps);
  CHECK(none.shadow()[0].to_vector() == std::vector<double>(3, 4.0));

  p.value.fill(1.0);
  Ema slow(ps, 0.999);
  p.value.fill(11.0);
  slow.update(ps);  // warm-up decay 1/10
  CHECK(slow.shadow()[0][0] == doctest::Approx(0.1 * 1.0 + 0.9 * 11.0));
  slow.update(ps);
  CHECK(slow.shadow()[0][0] == doctest::Approx(11.0 - (2.0 / 11.0) * 1.0));
}

TEST_CASE("early stopping") {
  EarlyStopping stop(2);
  CHECK(stop.update(1.0));
  CHECK_FALSE(stop.update(1.0));
  CHECK_FALSE(stop.should_stop());
  CHECK(stop.update(0.5));
  CHECK_FALSE(stop.update(0.7));
  CHECK_FALSE(stop.update(0.6));
  CHECK(stop.should_stop());
  CHECK(stop.best() == 0.5);
}

TEST_CASE("adamw first steps") {
  Parameter w{"w", Tensor({2}, std::vector<double>{1.0, -2.0}), Tensor()};
  Parameter b{"b", Tensor({1}, std::vector<double>{0.5}), Tensor()};
  b.decay = false;
  AdamWConfig cfg;
  cfg.weight_decay = 0.1;
  AdamW opt({&w, &b}, cfg);
  w.grad = Tensor({2}, std::vector<double>{0.3, -4.0});
  b.grad = Tensor({1}, std::vector<double>{2.0});
  opt.step(0.01);
  // bias-corrected moments equal g and g^2 after one step
  const auto expect = [&](double x, double g, bool decay) {
    if (decay) x *= 1.0 - 0.01 * 0.1;
    return x - 0.01 * g / (std::abs(g) + 1e-8);
  };
  CHECK(w.value[0] == doctest::Approx(expect(1.0, 0.3, true)).epsilon(1e-14));
  CHECK(w.value[1] == doctest::Approx(expect(-2.0, -4.0, true)).epsilon(1e-14));
  CHECK(b.value[0] == doctest::Approx(expect(0.5, 2.0, false)).epsilon(1e-14));
  CHECK(opt.steps() == 1);

  // a second step with the same gradient moves by the same amount again
  const double before = b.value[0];
  opt.step(0.01);
  CHECK(b.value[0] - before == doctest::Approx(-0.01 * 2.0 / (2.0 + 1e-8)).epsilon(1e-12));

  // a parameter that received no gradient is only decayed
  Parameter idle{"idle", Tensor({1}, 3.0), Tensor()};
  AdamW lone({&idle}, cfg);
  lone.step(0.5);
  CHECK(idle.value[0] == doctest::Approx(3.0 * (1.0 - 0.05)));
}

TEST_CASE("fit lowers the loss and is reproducible") {
  TinyRun run = tiny_run();
  Transformer a(run.config, 1);
  const TrainResult ra = fit(a, run.features.samples, tiny_train(30));
  CHECK(ra.steps == 30);
  REQUIRE(ra.log.size() >= 2);
  CHECK(ra.status == TrainStatus::completed);
  CHECK(ra.log.back().train_loss < ra.log.front().train_loss);
  CHECK(ra.best_epoch >= 0);
  for (const auto& row : ra.log) CHECK(std::isfinite(row.holdout_rmse_mm));

  // the model ends on the best EMA weights
  const auto now = snapshot_parameters(a);
  for (std::size_t i = 0; i < now.size(); ++i) CHECK(now[i].to_vector() == ra.best_ema[i].to_vector());

  Transformer b(run.config, 1);
  const TrainResult rb = fit(b, run.features.samples, tiny_train(30));
  const auto other = snapshot_parameters(b);
  for (std::size_t i = 0; i < now.size(); ++i) CHECK(now[i].to_vector() == other[i].to_vector());
  CHECK(ra.log.back().holdout_loss == rb.log.back().holdout_loss);

  testing::TempDir dir("trainlog");
  write_training_log(ra.log, dir / "log.csv");
  const std::string text = testing::read_text(dir / "log.csv");
  CHECK(text.rfind("epoch,step,lr,train_loss,holdout_loss,holdout_rmse_mm\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == static_cast<long>(ra.log.size()) + 1);
}

TEST_CASE("patience stops training") {
  TinyRun run = tiny_run();
  Transformer m(run.config, 2);
  TrainConfig cfg = tiny_train(1000);
  cfg.optim.lr = 0.0;  // holdout loss never improves after the first epoch
  cfg.patience = 2;
  const TrainResult r = fit(m, run.features.samples, cfg);
  CHECK(r.status == TrainStatus::early_stopped);
  CHECK(r.log.size() == 3);
  CHECK(r.best_epoch == 0);
}

TEST_CASE("predict_windows matches single predictions") {
  TinyRun run = tiny_run();
  Transformer m(run.config, 4);
  const auto& s = run.features.samples;
  const auto preds = predict_windows(m, s, s.test());
  REQUIRE(preds.size() == s.test().size());
  const Frame one = m.predict(window_tensor(*s.cube, s.test()[1], s.history, 6));
  CHECK(preds[1] == one);
}
