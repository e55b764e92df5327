#include "deform/raster.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace deform {
namespace {

using Lattice = std::array<std::int64_t, 2>;

// 2^28 lattice steps across the bounding box keeps the in-circle determinant
// below 2^117, inside the exact range of __int128.
constexpr double kLatticeSteps = 268435456.0;

constexpr std::int64_t kNoTriangle = -1;

double cross(const Point2& a, const Point2& b) { return a.x() * b.y() - a.y() * b.x(); }

class Builder {
 public:
  explicit Builder(Triangulation& t) : t_(t) {}

  void run(const std::vector<Index>& order) {
    const auto& L = t_.lattice;
    const Index n = static_cast<Index>(order.size());
    Index k = 2;
    while (k < n && orientation(L[order[0]], L[order[1]], L[order[k]]) == 0) ++k;
    if (k == n) throw GeometryError("triangulate: all points are collinear");

    const Index nv = static_cast<Index>(L.size());
    next_.assign(nv, -1);
    prev_.assign(nv, -1);
    hull_tri_.assign(nv, -1);

    const Index apex = order[k];
    const bool ccw = orientation(L[order[0]], L[order[1]], L[apex]) > 0;
    for (Index i = 0; i + 1 < k; ++i) {
      const Index a = order[i];
      const Index b = order[i + 1];
      const Index t = ccw ? add_triangle(a, b, apex) : add_triangle(b, a, apex);
      if (i > 0) link(t, t - 1);
    }
    // Hull in counter-clockwise order.
    std::vector<Index> hull;
    if (ccw) {
      for (Index i = 0; i < k; ++i) hull.push_back(order[i]);
      hull.push_back(apex);
    } else {
      hull.push_back(order[0]);
      hull.push_back(apex);
      for (Index i = k - 1; i >= 1; --i) hull.push_back(order[i]);
    }
    const Index h = static_cast<Index>(hull.size());
    for (Index i = 0; i < h; ++i) {
      next_[hull[i]] = hull[(i + 1) % h];
      prev_[hull[(i + 1) % h]] = hull[i];
    }
    for (Index t = 0; t < static_cast<Index>(t_.triangles.size()); ++t)
      for (int e = 0; e < 3; ++e)
        if (t_.neighbours[t][e] < 0) hull_tri_[t_.triangles[t][(e + 1) % 3]] = t;

    Index last = apex;
    for (Index i = k + 1; i < n; ++i) {
      insert_outside(order[i], last);
      last = order[i];
    }
    // Lawson pass over every edge; the incremental legalization normally leaves nothing to do.
    std::vector<std::pair<Index, int>> stack;
    for (Index t = 0; t < static_cast<Index>(t_.triangles.size()); ++t)
      for (int e = 0; e < 3; ++e) stack.emplace_back(t, e);
    drain(stack);
  }

 private:
  Index add_triangle(Index a, Index b, Index c) {
    t_.triangles.push_back({a, b, c});
    t_.neighbours.push_back({kNoTriangle, kNoTriangle, kNoTriangle});
    return static_cast<Index>(t_.triangles.size()) - 1;
  }

  // Index of the edge in t whose directed form is u->w.
  int edge_from(Index t, Index u) const {
    for (int e = 0; e < 3; ++e)
      if (t_.triangles[t][(e + 1) % 3] == u) return e;
    return -1;
  }

  void set_neighbour(Index t, Index old_nb, Index new_nb) {
    if (t < 0) return;
    for (int e = 0; e < 3; ++e)
      if (t_.neighbours[t][e] == old_nb) {
        t_.neighbours[t][e] = new_nb;
        return;
      }
  }

  // Connects two triangles sharing an undirected edge.
  void link(Index t, Index u) {
    for (int e = 0; e < 3; ++e) {
      const Index a = t_.triangles[t][(e + 1) % 3];
      const Index b = t_.triangles[t][(e + 2) % 3];
      for (int f = 0; f < 3; ++f) {
        if (t_.triangles[u][(f + 1) % 3] == b && t_.triangles[u][(f + 2) % 3] == a) {
          t_.neighbours[t][e] = u;
          t_.neighbours[u][f] = t;
          return;
        }
      }
    }
  }

  bool visible(Index u, Index p) const {
    const auto& L = t_.lattice;
    return orientation(L[u], L[next_[u]], L[p]) < 0;
  }

  void insert_outside(Index p, Index hint) {
    Index start = -1;
    if (visible(hint, p)) {
      start = hint;
    } else if (visible(prev_[hint], p)) {
      start = prev_[hint];
    } else {
      Index u = hint;
      do {
        if (visible(u, p)) {
          start = u;
          break;
        }
        u = next_[u];
      } while (u != hint);
    }
    if (start < 0) throw GeometryError("triangulate: internal error, point not outside hull");

    Index first = start;
    while (prev_[first] != start && visible(prev_[first], p)) first = prev_[first];
    Index last = start;
    while (next_[last] != first && visible(next_[last], p)) last = next_[last];
    const Index end = next_[last];

    std::vector<Index> created;
    Index u = first;
    Index previous = -1;
    while (true) {
      const Index w = next_[u];
      const Index old = hull_tri_[u];
      const Index t = add_triangle(w, u, p);
      // Edge w->u of the new triangle is opposite p (local 2).
      t_.neighbours[t][2] = old;
      t_.neighbours[old][edge_from(old, u)] = t;
      if (previous >= 0) {
        // Shared edge u-p: opposite w (local 0) here, opposite its middle vertex (local 1) in previous.
        t_.neighbours[t][0] = previous;
        t_.neighbours[previous][1] = t;
      }
      created.push_back(t);
      previous = t;
      if (u == last) break;
      u = w;
    }
    for (Index v = next_[first]; v != end;) {
      const Index nx = next_[v];
      next_[v] = prev_[v] = -1;
      v = nx;
    }
    next_[first] = p;
    prev_[p] = first;
    next_[p] = end;
    prev_[end] = p;
    hull_tri_[first] = created.front();
    hull_tri_[p] = created.back();

    std::vector<std::pair<Index, int>> stack;
    for (Index t : created) stack.emplace_back(t, 2);
    drain(stack);
  }

  void drain(std::vector<std::pair<Index, int>>& stack) {
    const auto& L = t_.lattice;
    while (!stack.empty()) {
      auto [t, k] = stack.back();
      stack.pop_back();
      const Index u = t_.neighbours[t][k];
      if (u < 0) continue;
      const auto& tv = t_.triangles[t];
      const Index a = tv[(k + 1) % 3];
      const Index b = tv[(k + 2) % 3];
      const int f = edge_from(u, b);
      if (f < 0) continue;
      const Index d = t_.triangles[u][f];
      if (in_circle(L[tv[0]], L[tv[1]], L[tv[2]], L[d]) <= 0) continue;
      flip(t, k, u, f, a, b, d);
      stack.emplace_back(t, 0);
      stack.emplace_back(u, 0);
      stack.emplace_back(t, 2);
      stack.emplace_back(u, 1);
    }
  }

  void flip(Index t, int k, Index u, int f, Index a, Index b, Index d) {
    const Index p = t_.triangles[t][k];
    const Index a1 = t_.neighbours[t][(k + 1) % 3];  // across b->p
    const Index b1 = t_.neighbours[t][(k + 2) % 3];  // across p->a
    // u is (d, b, a) rotated so that d sits at local f.
    const Index a2 = t_.neighbours[u][(f + 1) % 3];  // across a->d
    const Index b2 = t_.neighbours[u][(f + 2) % 3];  // across d->b

    t_.triangles[t] = {p, a, d};
    t_.neighbours[t] = {a2, u, b1};
    t_.triangles[u] = {p, d, b};
    t_.neighbours[u] = {b2, a1, t};
    set_neighbour(a2, u, t);
    set_neighbour(a1, t, u);
    if (a2 < 0) hull_tri_[a] = t;
    if (a1 < 0) hull_tri_[b] = u;
    if (b1 < 0) hull_tri_[p] = t;
    if (b2 < 0) hull_tri_[d] = u;
  }

  Triangulation& t_;
  std::vector<Index> next_, prev_, hull_tri_;
};

// Visibility walk; returns -1 when q is outside the hull.
Index locate(const Triangulation& tri, const Lattice& q, Index start) {
  const auto& L = tri.lattice;
  const Index ntri = static_cast<Index>(tri.triangles.size());
  Index t = start;
  for (Index step = 0; step < 4 * ntri + 16; ++step) {
    bool inside = true;
    for (int i = 0; i < 3; ++i) {
      const int e = static_cast<int>((i + step) % 3);
      const auto& v = tri.triangles[t];
      if (orientation(L[v[(e + 1) % 3]], L[v[(e + 2) % 3]], q) < 0) {
        const Index nb = tri.neighbours[t][e];
        if (nb < 0) return -1;
        t = nb;
        inside = false;
        break;
      }
    }
    if (inside) return t;
  }
  for (Index s = 0; s < ntri; ++s) {
    const auto& v = tri.triangles[s];
    if (orientation(L[v[0]], L[v[1]], q) >= 0 && orientation(L[v[1]], L[v[2]], q) >= 0 &&
        orientation(L[v[2]], L[v[0]], q) >= 0)
      return s;
  }
  return -1;
}

void write_header_double(std::ostream& out, const char* key, double a, double b) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%s %.17g %.17g\n", key, a, b);
  out << buf;
}

}  // namespace

GridSpec GridSpec::for_tile(const TileId& tile, Index height, Index width) {
  GridSpec g;
  g.height = height;
  g.width = width;
  g.origin_m = Point2(tile.origin_easting_m(), tile.origin_northing_m());
  g.extent_m = Point2(100000.0, 100000.0);
  return g;
}

void GridSpec::validate() const {
  if (height < 2 || width < 2)
    throw Error("grid: height and width must be >= 2, got " + std::to_string(height) + "x" + std::to_string(width));
  if (!(extent_m.x() > 0.0) || !(extent_m.y() > 0.0)) throw Error("grid: extent must be positive");
}

Point2 GridSpec::pixel_centre(Index row, Index col) const {
  const double dx = extent_m.x() / static_cast<double>(width);
  const double dy = extent_m.y() / static_cast<double>(height);
  return Point2(origin_m.x() + (static_cast<double>(col) + 0.5) * dx,
                origin_m.y() + extent_m.y() - (static_cast<double>(row) + 0.5) * dy);
}

int orientation(const Lattice& a, const Lattice& b, const Lattice& c) {
  const __int128 det = static_cast<__int128>(b[0] - a[0]) * (c[1] - a[1]) -
                       static_cast<__int128>(b[1] - a[1]) * (c[0] - a[0]);
  return (det > 0) - (det < 0);
}

int in_circle(const Lattice& a, const Lattice& b, const Lattice& c, const Lattice& d) {
  const __int128 adx = a[0] - d[0], ady = a[1] - d[1];
  const __int128 bdx = b[0] - d[0], bdy = b[1] - d[1];
  const __int128 cdx = c[0] - d[0], cdy = c[1] - d[1];
  const __int128 alift = adx * adx + ady * ady;
  const __int128 blift = bdx * bdx + bdy * bdy;
  const __int128 clift = cdx * cdx + cdy * cdy;
  const __int128 det = alift * (bdx * cdy - cdx * bdy) + blift * (cdx * ady - adx * cdy) +
                       clift * (adx * bdy - bdx * ady);
  return (det > 0) - (det < 0);
}

std::array<std::int64_t, 2> Triangulation::snap(const Point2& p) const {
  return {std::llround((p.x() - lattice_origin.x()) / lattice_scale),
          std::llround((p.y() - lattice_origin.y()) / lattice_scale)};
}

Triangulation triangulate(std::span<const Point2> points) {
  if (points.size() < 3) throw GeometryError("triangulate: need at least 3 points, got " + std::to_string(points.size()));
  Triangulation tri;
  Point2 lo = points[0], hi = points[0];
  for (const auto& p : points) {
    if (!p.allFinite()) throw GeometryError("triangulate: non-finite coordinate");
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const double span = (hi - lo).maxCoeff();
  if (!(span > 0.0)) throw GeometryError("triangulate: all points coincide");
  tri.lattice_origin = lo;
  tri.lattice_scale = span / kLatticeSteps;

  const Index n = static_cast<Index>(points.size());
  std::vector<Lattice> snapped(n);
  for (Index i = 0; i < n; ++i) snapped[i] = tri.snap(points[i]);
  std::vector<Index> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](Index a, Index b) {
    if (snapped[a] != snapped[b]) return snapped[a] < snapped[b];
    return a < b;
  });

  tri.point_vertex.assign(n, -1);
  for (Index i = 0; i < n; ++i) {
    const Index p = order[i];
    if (i > 0 && snapped[p] == snapped[order[i - 1]]) {
      tri.point_vertex[p] = tri.point_vertex[order[i - 1]];
      continue;
    }
    tri.point_vertex[p] = static_cast<Index>(tri.vertices.size());
    tri.vertices.push_back(points[p]);
    tri.vertex_source.push_back(p);
    tri.lattice.push_back(snapped[p]);
  }
  if (tri.vertices.size() < 3) throw GeometryError("triangulate: fewer than 3 distinct points");

  // Vertices were appended in lexicographic lattice order.
  std::vector<Index> sweep(tri.vertices.size());
  std::iota(sweep.begin(), sweep.end(), 0);
  Builder(tri).run(sweep);
  return tri;
}

InterpolationPlan plan_interpolation(const Triangulation& tri, std::span<const Point2> points, const GridSpec& grid) {
  grid.validate();
  InterpolationPlan plan;
  plan.grid = grid;
  plan.pixels.resize(grid.pixels());
  Index hint = 0;
  for (Index r = 0; r < grid.height; ++r) {
    for (Index c = 0; c < grid.width; ++c) {
      const Point2 q = grid.pixel_centre(r, c);
      auto& st = plan.pixels[r * grid.width + c];
      const Index t = locate(tri, tri.snap(q), hint);
      if (t >= 0) {
        hint = t;
        const auto& v = tri.triangles[t];
        const Point2& a = tri.vertices[v[0]];
        const Point2& b = tri.vertices[v[1]];
        const Point2& cc = tri.vertices[v[2]];
        const double area = cross(b - a, cc - a);
        const double wa = cross(b - q, cc - q) / area;
        const double wb = cross(cc - q, a - q) / area;
        st.point = {tri.vertex_source[v[0]], tri.vertex_source[v[1]], tri.vertex_source[v[2]]};
        st.weight = {wa, wb, 1.0 - wa - wb};
        st.inside_hull = true;
      } else {
        Index best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (Index i = 0; i < static_cast<Index>(points.size()); ++i) {
          const double d = (points[i] - q).squaredNorm();
          if (d < best_d) {
            best_d = d;
            best = i;
          }
        }
        st.point = {best, best, best};
        st.weight = {1.0, 0.0, 0.0};
        st.inside_hull = false;
      }
    }
  }
  return plan;
}

Frame InterpolationPlan::apply(std::span<const double> values) const {
  Frame out(grid.height, grid.width);
  double* dst = out.data();
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const auto& s = pixels[i];
    dst[i] = s.inside_hull ? s.weight[0] * values[s.point[0]] + s.weight[1] * values[s.point[1]] +
                                 s.weight[2] * values[s.point[2]]
                           : values[s.point[0]];
  }
  return out;
}

Frame interpolate_epoch(std::span<const Point2> points, std::span<const double> values, const GridSpec& grid) {
  if (points.size() != values.size())
    throw ShapeError("interpolate_epoch: " + std::to_string(points.size()) + " points but " +
                     std::to_string(values.size()) + " values");
  for (double v : values)
    if (!std::isfinite(v)) throw Error("interpolate_epoch: non-finite value");
  const auto tri = triangulate(points);
  return plan_interpolation(tri, points, grid).apply(values);
}

std::vector<Point2> point_coordinates(const PointCloudSeries& series) {
  std::vector<Point2> pts;
  pts.reserve(series.points.size());
  for (const auto& p : series.points) pts.emplace_back(p.easting_m, p.northing_m);
  return pts;
}

DisplacementCube rasterize_cube(PointCloudSeries series, const GridSpec& grid) {
  grid.validate();
  fill_missing(series);
  const auto pts = point_coordinates(series);
  const auto tri = triangulate(pts);
  const auto plan = plan_interpolation(tri, pts, grid);

  DisplacementCube cube;
  cube.grid = grid;
  cube.calendar = series.calendar;
  const Index T = series.calendar.size();
  cube.frames.resize(T);
  parallel_for(T, [&](Index t) {
    std::vector<double> values(series.points.size());
    for (std::size_t i = 0; i < series.points.size(); ++i) values[i] = series.points[i].displacement_mm[t];
    cube.frames[t] = plan.apply(values);
  });
  return cube;
}

void write_defcube(const ChannelStack& stack, const std::filesystem::path& path) {
  static_assert(std::endian::native == std::endian::little, "DEFCUBE1 writer assumes a little-endian host");
  const Index T = stack.epochs();
  const Index C = static_cast<Index>(stack.channels.size());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write cube: " + path.string());
  std::string dates_ref = "-";
  if (!stack.dates.empty()) {
    const auto dates_path = std::filesystem::path(path.string() + ".dates.txt");
    std::ofstream dates(dates_path, std::ios::binary);
    if (!dates) throw Error("cannot write date list: " + dates_path.string());
    for (const auto& d : stack.dates) dates << format_date_iso(d) << '\n';
    dates_ref = dates_path.filename().string();
  }
  out << "DEFCUBE1\n";
  out << "T " << T << '\n';
  out << "H " << stack.grid.height << '\n';
  out << "W " << stack.grid.width << '\n';
  write_header_double(out, "origin", stack.grid.origin_m.x(), stack.grid.origin_m.y());
  write_header_double(out, "extent", stack.grid.extent_m.x(), stack.grid.extent_m.y());
  out << "dates " << dates_ref << '\n';
  out << "channels ";
  for (Index c = 0; c < C; ++c) out << (c ? "," : "") << stack.channels[c];
  out << '\n';
  for (Index t = 0; t < T; ++t) {
    if (static_cast<Index>(stack.data[t].size()) != C) throw ShapeError("write_defcube: channel count mismatch");
    for (Index c = 0; c < C; ++c) {
      const Frame& f = stack.data[t][c];
      if (f.rows() != stack.grid.height || f.cols() != stack.grid.width)
        throw ShapeError("write_defcube: frame shape mismatch");
      out.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * sizeof(double)));
    }
  }
}

ChannelStack read_defcube(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open cube: " + path.string());
  std::string line;
  auto expect = [&](const std::string& key) {
    if (!std::getline(in, line)) throw Error("cube header truncated: " + path.string());
    std::istringstream ls(line);
    std::string k;
    ls >> k;
    if (k != key) throw Error("cube header: expected '" + key + "', got '" + k + "'");
    std::string rest;
    std::getline(ls, rest);
    if (!rest.empty() && rest.front() == ' ') rest.erase(0, 1);
    return rest;
  };
  if (!std::getline(in, line) || line != "DEFCUBE1") throw Error("not a DEFCUBE1 file: " + path.string());
  ChannelStack stack;
  const Index T = std::stoll(expect("T"));
  stack.grid.height = std::stoll(expect("H"));
  stack.grid.width = std::stoll(expect("W"));
  {
    std::istringstream s(expect("origin"));
    double x, y;
    s >> x >> y;
    stack.grid.origin_m = Point2(x, y);
  }
  {
    std::istringstream s(expect("extent"));
    double x, y;
    s >> x >> y;
    stack.grid.extent_m = Point2(x, y);
  }
  const std::string dates_ref = expect("dates");
  {
    std::string names = expect("channels");
    std::stringstream s(names);
    std::string item;
    while (std::getline(s, item, ',')) stack.channels.push_back(item);
  }
  if (dates_ref != "-") {
    const auto dates_path = path.parent_path() / dates_ref;
    std::ifstream dates(dates_path);
    if (!dates) throw Error("cannot open date list: " + dates_path.string());
    while (std::getline(dates, line)) {
      if (line.empty()) continue;
      auto d = parse_date(line);
      if (!d) throw Error("bad date in " + dates_path.string() + ": " + line);
      stack.dates.push_back(*d);
    }
    if (static_cast<Index>(stack.dates.size()) != T) throw Error("date list length does not match T");
  }
  const Index C = static_cast<Index>(stack.channels.size());
  stack.data.assign(T, std::vector<Frame>(C));
  for (Index t = 0; t < T; ++t) {
    for (Index c = 0; c < C; ++c) {
      Frame f(stack.grid.height, stack.grid.width);
      in.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(f.size() * sizeof(double)));
      if (!in) throw Error("cube payload truncated: " + path.string());
      stack.data[t][c] = std::move(f);
    }
  }
  return stack;
}

void write_cube(const DisplacementCube& cube, const std::filesystem::path& path) {
  ChannelStack stack;
  stack.grid = cube.grid;
  stack.dates = cube.calendar.dates();
  stack.channels = {"displacement"};
  for (const auto& f : cube.frames) stack.data.push_back({f});
  write_defcube(stack, path);
}

DisplacementCube read_cube(const std::filesystem::path& path) {
  auto stack = read_defcube(path);
  if (stack.channels.size() != 1) throw Error("cube " + path.string() + " is not a displacement cube");
  DisplacementCube cube;
  cube.grid = stack.grid;
  cube.calendar = AcquisitionCalendar(stack.dates);
  for (auto& frames : stack.data) cube.frames.push_back(std::move(frames[0]));
  return cube;
}

void write_cube_csv(const DisplacementCube& cube, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  char name[32];
  char buf[40];
  for (Index t = 0; t < cube.epochs(); ++t) {
    std::snprintf(name, sizeof name, "epoch_%04td.csv", t);
    std::ofstream out(dir / name);
    const Frame& f = cube.frames[t];
    for (Index r = 0; r < f.rows(); ++r) {
      for (Index c = 0; c < f.cols(); ++c) {
        std::snprintf(buf, sizeof buf, "%s%.17g", c ? "," : "", f(r, c));
        out << buf;
      }
      out << '\n';
    }
  }
}

}  // namespace deform
