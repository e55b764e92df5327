#pragma once

#include "deform/common.hpp"
#include "deform/ingest.hpp"

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace deform {

using Point2 = Eigen::Vector2d;

/// Regular raster over a rectangular extent. Pixel (row, col) is sampled at its
/// centre; row 0 is the northern edge.
struct GridSpec {
  Index height = 64;
  Index width = 64;
  Point2 origin_m = Point2::Zero();  // south-west corner (easting, northing)
  Point2 extent_m = Point2(100000.0, 100000.0);

  static GridSpec for_tile(const TileId& tile, Index height = 64, Index width = 64);
  void validate() const;
  Point2 pixel_centre(Index row, Index col) const;
  Index pixels() const { return height * width; }

  friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

struct DisplacementCube {
  GridSpec grid;
  AcquisitionCalendar calendar;
  std::vector<Frame> frames;  // T frames of height x width, millimetres

  Index epochs() const { return static_cast<Index>(frames.size()); }
};

/// Delaunay triangulation with counter-clockwise triangles.
struct Triangulation {
  std::vector<Point2> vertices;                 // unique vertices, original coordinates
  std::vector<Index> vertex_source;             // vertex -> first input point index
  std::vector<Index> point_vertex;              // input point -> vertex
  std::vector<std::array<Index, 3>> triangles;  // vertex indices, CCW
  std::vector<std::array<Index, 3>> neighbours; // triangle across the edge opposite vertex k, -1 on hull

  /// Snapped integer coordinates used by the exact predicates.
  std::vector<std::array<std::int64_t, 2>> lattice;
  Point2 lattice_origin = Point2::Zero();
  double lattice_scale = 1.0;

  std::array<std::int64_t, 2> snap(const Point2& p) const;
};

/// Exact sign of the orientation of (a, b, c) on lattice coordinates: >0 counter-clockwise.
int orientation(const std::array<std::int64_t, 2>& a, const std::array<std::int64_t, 2>& b,
                const std::array<std::int64_t, 2>& c);
/// Exact sign of the in-circle test: >0 when d lies strictly inside the circumcircle of CCW (a, b, c).
int in_circle(const std::array<std::int64_t, 2>& a, const std::array<std::int64_t, 2>& b,
              const std::array<std::int64_t, 2>& c, const std::array<std::int64_t, 2>& d);

/// Throws GeometryError for fewer than 3 distinct points or an all-collinear set.
Triangulation triangulate(std::span<const Point2> points);

/// Per-pixel interpolation stencil: barycentric weights inside the hull,
/// nearest input point outside it.
struct InterpolationPlan {
  struct Stencil {
    std::array<Index, 3> point{0, 0, 0};  // input point indices
    std::array<double, 3> weight{1.0, 0.0, 0.0};
    bool inside_hull = false;
  };
  GridSpec grid;
  std::vector<Stencil> pixels;  // row-major

  Frame apply(std::span<const double> values) const;
};

InterpolationPlan plan_interpolation(const Triangulation& tri, std::span<const Point2> points, const GridSpec& grid);

Frame interpolate_epoch(std::span<const Point2> points, std::span<const double> values, const GridSpec& grid);

/// Fills and drops incomplete points (see fill_missing), triangulates once and
/// interpolates every epoch.
DisplacementCube rasterize_cube(PointCloudSeries series, const GridSpec& grid);

std::vector<Point2> point_coordinates(const PointCloudSeries& series);

/// Multi-channel raster container serialized as DEFCUBE1: 8 text header lines
/// then T*C*H*W little-endian float64 values in (t, c, row, col) order.
struct ChannelStack {
  GridSpec grid;
  std::vector<Date> dates;              // empty when the stack is not time-indexed
  std::vector<std::string> channels;
  std::vector<std::vector<Frame>> data; // [t][c]

  Index epochs() const { return static_cast<Index>(data.size()); }
};

void write_defcube(const ChannelStack& stack, const std::filesystem::path& path);
ChannelStack read_defcube(const std::filesystem::path& path);

void write_cube(const DisplacementCube& cube, const std::filesystem::path& path);
DisplacementCube read_cube(const std::filesystem::path& path);

/// Debug export: one CSV per epoch (epoch_0000.csv ...) with `height` rows.
void write_cube_csv(const DisplacementCube& cube, const std::filesystem::path& dir);

}  // namespace deform
