#include "doctest.h"

#include "deform/stgcn.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstdlib>

using namespace deform;
using namespace deform::ad;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  for (Index i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
  return t;
}

// Queen adjacency with self-loops and symmetric normalization, built densely from the definition.
Matrix dense_normalized(Index h, Index w) {
  const Index n = h * w;
  Matrix a = Matrix::Zero(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) {
      const Index dr = std::abs(i / w - j / w), dc = std::abs(i % w - j % w);
      if (dr <= 1 && dc <= 1) a(i, j) = 1.0;
    }
  const Vector d = a.rowwise().sum();
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) a(i, j) /= std::sqrt(d(i) * d(j));
  return a;
}

StgcnConfig micro(Index channels = 6) {
  StgcnConfig c;
  c.hidden = {4, 3};
  c.kernel = 2;
  c.history_length = 6;
  c.height = 8;
  c.width = 8;
  c.input_channels = channels;
  return c;
}

}  // namespace

TEST_CASE("queen degrees") {
  const auto g = build_normalized_adjacency(5, 6);
  CHECK(g.degree(2 * 6 + 3) == 9);  // interior
  CHECK(g.degree(0) == 4);          // corner
  CHECK(g.degree(5) == 4);
  CHECK(g.degree(3) == 6);          // top edge
  CHECK(g.degree(2 * 6) == 6);      // left edge
  const auto one = build_normalized_adjacency(1, 1);
  CHECK(one.degree(0) == 1);
  CHECK_THROWS(build_normalized_adjacency(1, 5));
}

TEST_CASE("normalized adjacency matches the dense definition and is symmetric") {
  for (auto [h, w] : {std::pair<Index, Index>{2, 2}, {3, 4}, {6, 5}}) {
    const auto g = build_normalized_adjacency(h, w);
    const Matrix sparse = Matrix(*g.normalized);
    CHECK((sparse - dense_normalized(h, w)).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((sparse - sparse.transpose()).cwiseAbs().maxCoeff() == 0.0);
    Eigen::SelfAdjointEigenSolver<Matrix> es(sparse);
    CHECK(es.eigenvalues().cwiseAbs().maxCoeff() <= 1.0 + 1e-9);
  }
}

TEST_CASE("gated temporal convolution") {
  const Tensor x = random_tensor({3, 5, 7}, 1);
  const Tensor w_in = random_tensor({4, 3, 3}, 2), w_out = random_tensor({4, 3, 3}, 3);
  const Tensor b_out = random_tensor({4}, 4);
  Tape t;
  Var linear_branch = conv1d_time(t.constant(x), t.constant(w_out), t.constant(b_out));

  Var open = temporal_gated_conv(t.constant(x), t.constant(Tensor({4, 3, 3})), t.constant(Tensor({4}, 50.0)),
                                 t.constant(w_out), t.constant(b_out));
  CHECK(open.shape() == Shape{4, 5, 5});
  for (Index i = 0; i < open.value().size(); ++i)
    CHECK(open.value()[i] == doctest::Approx(linear_branch.value()[i]).epsilon(1e-12));

  Var shut = temporal_gated_conv(t.constant(x), t.constant(w_in), t.constant(Tensor({4}, -50.0)), t.constant(w_out),
                                 t.constant(b_out));
  CHECK(shut.value().array().abs().maxCoeff() < 1e-12);

  CHECK_THROWS_AS(temporal_gated_conv(t.constant(Tensor({3, 5, 2})), t.constant(w_in), t.constant(Tensor({4})),
                                      t.constant(w_out), t.constant(b_out)),
                  ShapeError);
}

TEST_CASE("graph convolution on an isolated node is the channel mix") {
  const auto g = build_normalized_adjacency(1, 1);
  const Tensor x = random_tensor({3, 1, 4}, 5);
  Tensor eye({3, 3});
  for (Index i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  Tape t;
  Var y = graph_conv(t.constant(x), t.constant(eye), g.normalized);
  CHECK(y.value().to_vector() == x.to_vector());
}

TEST_CASE("graph convolution keeps constants away from the border") {
  const auto g = build_normalized_adjacency(7, 7);
  Tensor eye({1, 1}, 1.0);
  Tape t;
  Var y = graph_conv(t.constant(Tensor({1, 49, 2}, 3.0)), t.constant(eye), g.normalized);
  // nodes whose neighbours all have degree 9: rows and columns 2..4
  for (Index r = 2; r <= 4; ++r)
    for (Index c = 2; c <= 4; ++c)
      for (Index k = 0; k < 2; ++k) CHECK(y.value()[(r * 7 + c) * 2 + k] == doctest::Approx(3.0).epsilon(1e-14));
}

TEST_CASE("graph convolution matches a dense oracle") {
  const Index h = 4, w = 5, n = h * w, C = 3, T = 2;
  const auto g = build_normalized_adjacency(h, w);
  const Matrix a = dense_normalized(h, w);
  const Tensor x = random_tensor({C, n, T}, 6);
  const Tensor wg = random_tensor({C, C}, 7);
  Tape t;
  Var y = graph_conv(t.constant(x), t.constant(wg), g.normalized);
  for (Index c = 0; c < C; ++c)
    for (Index j = 0; j < n; ++j)
      for (Index k = 0; k < T; ++k) {
        double ref = 0.0;
        for (Index c2 = 0; c2 < C; ++c2)
          for (Index m = 0; m < n; ++m) ref += wg[c * C + c2] * a(m, j) * x[(c2 * n + m) * T + k];
        CHECK(std::abs(y.value()[(c * n + j) * T + k] - ref) <= 1e-12);
      }
}

TEST_CASE("one graph convolution reaches only the 1-hop neighbourhood") {
  const Index h = 6, w = 6, n = h * w;
  const auto g = build_normalized_adjacency(h, w);
  const Tensor x = random_tensor({2, n, 1}, 8);
  const Tensor wg = random_tensor({2, 2}, 9);
  for (Index node : {0, 14, 35}) {
    Tensor xp = x;
    xp[node] += 1.0;  // channel 0
    Tape t;
    const Tensor a = graph_conv(t.constant(x), t.constant(wg), g.normalized).value();
    const Tensor b = graph_conv(t.constant(xp), t.constant(wg), g.normalized).value();
    for (Index c = 0; c < 2; ++c)
      for (Index j = 0; j < n; ++j) {
        const bool near = std::abs(j / w - node / w) <= 1 && std::abs(j % w - node % w) <= 1;
        const bool changed = a[c * n + j] != b[c * n + j];
        if (!near) CHECK_FALSE(changed);
        if (near) CHECK(changed);
      }
  }
}

TEST_CASE("forward shape, zero input and gradient check") {
  const auto cfg = micro();
  Stgcn model(cfg, 3);
  CHECK(cfg.final_time() == 2);
  const Tensor w = random_tensor({cfg.history_length, 6, 8, 8}, 10);
  const Frame pred = model.predict(w);
  CHECK(pred.rows() == 8);
  CHECK(pred.cols() == 8);
  CHECK(pred.allFinite());

  const Frame zero = model.predict(Tensor(w.shape()));
  CHECK(zero.array().abs().maxCoeff() == 0.0);

  const Tensor target = random_tensor({8, 8}, 11);
  auto params = model.parameters().all();
  const double err = grad_check_parameters(
      params,
      [&](Tape& t) {
        ForwardOptions opt;
        opt.grad = true;
        return mean(square(sub(model.forward(t, w, opt), t.constant(target))));
      },
      1e-5, 8);
  CHECK(err <= 1e-3);
}

TEST_CASE("unimodal stgcn and config checks") {
  auto cfg = micro(1);
  Stgcn model(cfg, 1);
  CHECK(model.input_channels() == 1);
  CHECK(model.predict(random_tensor({6, 1, 8, 8}, 1)).allFinite());
  CHECK_THROWS_AS(model.predict(random_tensor({6, 6, 8, 8}, 1)), ShapeError);
  cfg.history_length = 4;
  CHECK_THROWS(cfg.validate());
  const auto back = StgcnConfig::from_json(micro().to_json());
  CHECK(back.to_json() == micro().to_json());
}
