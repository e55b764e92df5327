#include "doctest.h"

#include "deform/raster.hpp"
#include "deform/synth.hpp"
#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

using namespace deform;
using testing::TempDir;
using testing::ymd;

namespace {

std::vector<Point2> random_points(int n, Rng& rng, double lo = 0.0, double hi = 1000.0) {
  std::vector<Point2> pts;
  for (int i = 0; i < n; ++i) pts.emplace_back(rng.uniform(lo, hi), rng.uniform(lo, hi));
  return pts;
}

// Brute-force empty-circumcircle check over every vertex of the triangulation.
bool is_delaunay(const Triangulation& tri) {
  for (const auto& t : tri.triangles) {
    const auto& a = tri.lattice[t[0]];
    const auto& b = tri.lattice[t[1]];
    const auto& c = tri.lattice[t[2]];
    if (orientation(a, b, c) <= 0) return false;
    for (std::size_t v = 0; v < tri.lattice.size(); ++v) {
      if (static_cast<Index>(v) == t[0] || static_cast<Index>(v) == t[1] || static_cast<Index>(v) == t[2]) continue;
      if (in_circle(a, b, c, tri.lattice[v]) > 0) return false;
    }
  }
  return true;
}

double triangle_area_sum(const Triangulation& tri) {
  double s = 0.0;
  for (const auto& t : tri.triangles) {
    const Point2 u = tri.vertices[t[1]] - tri.vertices[t[0]];
    const Point2 w = tri.vertices[t[2]] - tri.vertices[t[0]];
    s += 0.5 * (u.x() * w.y() - u.y() * w.x());
  }
  return s;
}

GridSpec small_grid(Index h, Index w, double size = 1000.0) {
  GridSpec g;
  g.height = h;
  g.width = w;
  g.origin_m = Point2(0.0, 0.0);
  g.extent_m = Point2(size, size);
  return g;
}

}  // namespace

TEST_CASE("exact predicates") {
  CHECK(orientation({0, 0}, {1, 0}, {0, 1}) > 0);
  CHECK(orientation({0, 0}, {0, 1}, {1, 0}) < 0);
  CHECK(orientation({0, 0}, {1, 1}, {2, 2}) == 0);
  CHECK(in_circle({0, 0}, {2, 0}, {0, 2}, {1, 1}) > 0);
  CHECK(in_circle({0, 0}, {2, 0}, {0, 2}, {2, 2}) == 0);
  CHECK(in_circle({0, 0}, {2, 0}, {0, 2}, {3, 3}) < 0);
  // large coordinates near the lattice limit stay exact
  const std::int64_t big = std::int64_t{1} << 28;
  CHECK(in_circle({0, 0}, {big, 0}, {0, big}, {big, big}) == 0);
  CHECK(in_circle({0, 0}, {big, 0}, {0, big}, {big - 1, big - 1}) > 0);
}

TEST_CASE("three points give one triangle") {
  std::vector<Point2> p{{0, 0}, {1, 0}, {0, 1}};
  const auto tri = triangulate(p);
  CHECK(tri.triangles.size() == 1);
}

TEST_CASE("four convex points give two triangles on the Delaunay diagonal") {
  std::vector<Point2> p{{0, 0}, {4, 0}, {5, 2}, {0, 1}};
  const auto tri = triangulate(p);
  REQUIRE(tri.triangles.size() == 2);
  CHECK(is_delaunay(tri));
  // The shared edge is the diagonal both triangles contain.
  std::set<Index> a(tri.triangles[0].begin(), tri.triangles[0].end());
  std::set<Index> b(tri.triangles[1].begin(), tri.triangles[1].end());
  std::vector<Index> shared;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(shared));
  REQUIRE(shared.size() == 2);
  // Enumerate both diagonals and keep the one whose triangles pass the circumcircle test.
  const auto& L = tri.lattice;
  auto vtx = [&](int input) { return tri.point_vertex[input]; };
  auto ccw = [&](Index i, Index j, Index k) {
    return orientation(L[i], L[j], L[k]) > 0 ? std::array<Index, 3>{i, j, k} : std::array<Index, 3>{i, k, j};
  };
  auto diag_ok = [&](int u, int v, int w, int x) {
    const auto t = ccw(vtx(u), vtx(v), vtx(w));
    return in_circle(L[t[0]], L[t[1]], L[t[2]], L[vtx(x)]) <= 0;
  };
  const bool d02 = diag_ok(0, 1, 2, 3) && diag_ok(0, 2, 3, 1);
  const bool d13 = diag_ok(0, 1, 3, 2) && diag_ok(1, 2, 3, 0);
  REQUIRE(d02 != d13);
  std::set<Index> expected = d02 ? std::set<Index>{vtx(0), vtx(2)} : std::set<Index>{vtx(1), vtx(3)};
  CHECK(std::set<Index>(shared.begin(), shared.end()) == expected);
}

TEST_CASE("unit square plus centre gives four triangles") {
  std::vector<Point2> p{{0, 0}, {1, 0}, {1, 1}, {0, 1}, {0.5, 0.5}};
  const auto tri = triangulate(p);
  CHECK(tri.triangles.size() == 4);
  CHECK(is_delaunay(tri));
  CHECK(triangle_area_sum(tri) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("random point sets are Delaunay and cover the hull") {
  Rng rng(11);
  for (int n : {3, 10, 50, 200}) {
    const auto pts = random_points(n, rng);
    const auto tri = triangulate(pts);
    CHECK(is_delaunay(tri));
    // Euler: 2n - 2 - h triangles for n vertices with h on the hull
    Index hull_edges = 0;
    for (const auto& nb : tri.neighbours)
      for (Index k : nb) hull_edges += (k < 0);
    CHECK(static_cast<Index>(tri.triangles.size()) == 2 * static_cast<Index>(tri.vertices.size()) - 2 - hull_edges);
    // neighbour links are symmetric
    for (std::size_t t = 0; t < tri.triangles.size(); ++t)
      for (Index nb : tri.neighbours[t]) {
        if (nb < 0) continue;
        const auto& back = tri.neighbours[nb];
        CHECK(std::find(back.begin(), back.end(), static_cast<Index>(t)) != back.end());
      }
  }
}

TEST_CASE("grid-aligned and cocircular points triangulate") {
  std::vector<Point2> pts;
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j) pts.emplace_back(i * 10.0, j * 10.0);
  const auto tri = triangulate(pts);
  CHECK(tri.triangles.size() == 50);
  CHECK(is_delaunay(tri));
  CHECK(triangle_area_sum(tri) == doctest::Approx(2500.0).epsilon(1e-12));
}

TEST_CASE("duplicate points share a vertex") {
  std::vector<Point2> p{{0, 0}, {1, 0}, {0, 1}, {1, 0}};
  const auto tri = triangulate(p);
  CHECK(tri.vertices.size() == 3);
  CHECK(tri.point_vertex[1] == tri.point_vertex[3]);
  CHECK(tri.vertex_source[tri.point_vertex[3]] == 1);
}

TEST_CASE("degenerate inputs are rejected") {
  std::vector<Point2> two{{0, 0}, {1, 1}};
  CHECK_THROWS_AS(triangulate(two), GeometryError);
  std::vector<Point2> line{{0, 0}, {1, 1}, {2, 2}, {5, 5}};
  CHECK_THROWS_AS(triangulate(line), GeometryError);
  std::vector<Point2> same{{1, 1}, {1, 1}, {1, 1}};
  CHECK_THROWS_AS(triangulate(same), GeometryError);
}

TEST_CASE("affine fields are reproduced inside the hull") {
  Rng rng(3);
  auto pts = random_points(300, rng);
  // corners guarantee every pixel centre lies inside the hull
  pts.push_back({0, 0});
  pts.push_back({1000, 0});
  pts.push_back({0, 1000});
  pts.push_back({1000, 1000});
  std::vector<double> values;
  for (const auto& p : pts) values.push_back(p.x() + p.y());
  const auto grid = small_grid(32, 32);
  const Frame f = interpolate_epoch(pts, values, grid);
  double err = 0.0;
  for (Index r = 0; r < 32; ++r)
    for (Index c = 0; c < 32; ++c) {
      const Point2 q = grid.pixel_centre(r, c);
      err = std::max(err, std::abs(f(r, c) - (q.x() + q.y())));
    }
  CHECK(err <= 1e-10 * 2000.0);
  // a general affine function with an offset
  for (std::size_t i = 0; i < pts.size(); ++i) values[i] = 3.5 - 0.25 * pts[i].x() + 0.75 * pts[i].y();
  const Frame g = interpolate_epoch(pts, values, grid);
  err = 0.0;
  for (Index r = 0; r < 32; ++r)
    for (Index c = 0; c < 32; ++c) {
      const Point2 q = grid.pixel_centre(r, c);
      err = std::max(err, std::abs(g(r, c) - (3.5 - 0.25 * q.x() + 0.75 * q.y())));
    }
  CHECK(err <= 1e-10);
}

TEST_CASE("constant fields stay constant") {
  Rng rng(4);
  const auto pts = random_points(40, rng, 200, 800);
  std::vector<double> values(pts.size(), 5.0);
  const Frame f = interpolate_epoch(pts, values, small_grid(16, 16));
  CHECK((f.array() - 5.0).abs().maxCoeff() < 1e-12);
}

TEST_CASE("outside the hull the nearest point wins") {
  Rng rng(9);
  const auto pts = random_points(30, rng, 400, 600);
  std::vector<double> values;
  for (std::size_t i = 0; i < pts.size(); ++i) values.push_back(static_cast<double>(i));
  const auto grid = small_grid(20, 20);
  const auto tri = triangulate(pts);
  const auto plan = plan_interpolation(tri, pts, grid);
  const Frame f = plan.apply(values);
  Index outside = 0;
  for (Index r = 0; r < 20; ++r)
    for (Index c = 0; c < 20; ++c) {
      if (plan.pixels[r * 20 + c].inside_hull) continue;
      ++outside;
      const Point2 q = grid.pixel_centre(r, c);
      Index best = 0;
      for (std::size_t i = 1; i < pts.size(); ++i)
        if ((pts[i] - q).squaredNorm() < (pts[best] - q).squaredNorm()) best = static_cast<Index>(i);
      CHECK(f(r, c) == values[best]);
    }
  CHECK(outside > 0);
}

TEST_CASE("interpolation never overshoots its triangle") {
  Rng rng(21);
  const auto pts = random_points(80, rng);
  std::vector<double> values;
  for (std::size_t i = 0; i < pts.size(); ++i) values.push_back(rng.normal(0.0, 5.0));
  const auto tri = triangulate(pts);
  const auto plan = plan_interpolation(tri, pts, small_grid(24, 24));
  const Frame f = plan.apply(values);
  for (Index i = 0; i < f.size(); ++i) {
    const auto& st = plan.pixels[i];
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (int k = 0; k < 3; ++k) {
      if (st.weight[k] == 0.0) continue;
      CHECK(st.weight[k] >= 0.0);
      lo = std::min(lo, values[st.point[k]]);
      hi = std::max(hi, values[st.point[k]]);
    }
    CHECK(f.data()[i] >= lo - 1e-12);
    CHECK(f.data()[i] <= hi + 1e-12);
    CHECK(st.weight[0] + st.weight[1] + st.weight[2] == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("pixel centres run north to south") {
  const auto g = GridSpec::for_tile(TileId{32, 34}, 64, 64);
  const Point2 top_left = g.pixel_centre(0, 0);
  CHECK(top_left.x() == doctest::Approx(3200000.0 + 781.25));
  CHECK(top_left.y() == doctest::Approx(3500000.0 - 781.25));
  CHECK(g.pixel_centre(63, 0).y() < top_left.y());
  CHECK_THROWS(small_grid(1, 5).validate());
}

TEST_CASE("rasterizing a synthetic tile stays within the smoothness bound") {
  // Trend only, so each epoch is velocity * years, a field with a known Hessian bound.
  RegimeSpec spec = RegimeSpec::preset(Regime::trend);
  spec.noise_sigma = 0.0;
  spec.dropout = 0.0;
  spec.point_count = 500;
  spec.epochs = 6;
  spec.height = 32;
  spec.width = 32;
  const auto tile = generate_tile(spec);
  const auto pts = point_coordinates(tile.points);
  const auto tri = triangulate(pts);
  const auto plan = plan_interpolation(tri, pts, tile.truth.grid);
  const auto cube = rasterize_cube(tile.points, tile.truth.grid);
  CHECK(cube.epochs() == 6);

  Index checked = 0;
  for (Index t = 0; t < cube.epochs(); ++t) {
    const double m = tile.velocity.hessian_bound() * tile.truth.calendar.epoch_days()[t] / 365.25;
    for (Index r = 0; r < 32; ++r)
      for (Index c = 0; c < 32; ++c) {
        const auto& st = plan.pixels[r * 32 + c];
        if (!st.inside_hull) continue;
        const Point2 q = tile.truth.grid.pixel_centre(r, c);
        // Taylor remainder of linear interpolation: |f - If| <= M/2 sum_i w_i |x_i - q|^2
        double s = 0.0;
        for (int k = 0; k < 3; ++k) s += st.weight[k] * (pts[st.point[k]] - q).squaredNorm();
        const double err = std::abs(cube.frames[t](r, c) - tile.signal(q, t));
        CHECK(err <= 0.5 * m * s + 1e-9);
        ++checked;
      }
  }
  CHECK(checked > 0);
}

TEST_CASE("rasterization shape and determinism") {
  PointCloudSeries s;
  s.tile = TileId{32, 34};
  s.calendar = AcquisitionCalendar::regular(ymd(2018, 1, 1), 4, 6);
  Rng rng(1);
  for (int i = 0; i < 20; ++i)
    s.points.push_back({3200000.0 + rng.uniform() * 1e5, 3400000.0 + rng.uniform() * 1e5,
                        {0.0, rng.normal(), rng.normal(), rng.normal()}});
  const auto grid = GridSpec::for_tile(s.tile);
  const auto a = rasterize_cube(s, grid);
  const auto b = rasterize_cube(s, grid);
  REQUIRE(a.epochs() == 4);
  CHECK(a.frames[0].rows() == 64);
  CHECK(a.frames[0].cols() == 64);
  CHECK((a.frames[0].array() == 0.0).all());
  for (Index t = 0; t < 4; ++t) CHECK(a.frames[t] == b.frames[t]);
}

TEST_CASE("defcube round trip") {
  TempDir dir("raster");
  Rng rng(2);
  DisplacementCube cube;
  cube.grid = GridSpec::for_tile(TileId{40, 20}, 8, 6);
  cube.calendar = AcquisitionCalendar::regular(ymd(2019, 2, 3), 5, 12);
  for (int t = 0; t < 5; ++t) cube.frames.push_back(testing::random_frame(8, 6, rng, 3.0));
  const auto path = dir / "cube.defcube";
  write_cube(cube, path);
  const auto back = read_cube(path);
  CHECK(back.grid == cube.grid);
  CHECK(back.calendar.dates() == cube.calendar.dates());
  for (int t = 0; t < 5; ++t) CHECK(back.frames[t] == cube.frames[t]);
  CHECK(testing::read_text(path).rfind("DEFCUBE1\n", 0) == 0);

  ChannelStack stack;
  stack.grid = cube.grid;
  stack.channels = {"a", "b"};
  stack.data = {{cube.frames[0], cube.frames[1]}};
  write_defcube(stack, dir / "s.defcube");
  const auto s2 = read_defcube(dir / "s.defcube");
  CHECK(s2.channels == stack.channels);
  CHECK(s2.dates.empty());
  CHECK(s2.data[0][1] == cube.frames[1]);

  testing::write_text(dir / "bad.defcube", "NOTCUBE\n");
  CHECK_THROWS_AS(read_defcube(dir / "bad.defcube"), Error);
}

TEST_CASE("csv debug export writes one file per epoch") {
  TempDir dir("raster");
  DisplacementCube cube;
  cube.grid = GridSpec::for_tile(TileId{1, 1}, 3, 4);
  cube.calendar = AcquisitionCalendar::regular(ymd(2019, 1, 1), 2, 6);
  cube.frames = {Frame::Constant(3, 4, 1.5), Frame::Constant(3, 4, -2.0)};
  write_cube_csv(cube, dir.path());
  CHECK(std::filesystem::exists(dir / "epoch_0000.csv"));
  CHECK(std::filesystem::exists(dir / "epoch_0001.csv"));
  const auto text = testing::read_text(dir / "epoch_0001.csv");
  CHECK(std::count(text.begin(), text.end(), '\n') == 3);
}
