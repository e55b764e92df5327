#pragma once

// Small helpers shared by the unit tests.

#include "deform/common.hpp"
#include "deform/ingest.hpp"
#include "deform/raster.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <unistd.h>

namespace testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("deform_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline deform::Frame random_frame(deform::Index h, deform::Index w, deform::Rng& rng, double scale = 1.0) {
  deform::Frame f(h, w);
  for (deform::Index i = 0; i < f.size(); ++i) f.data()[i] = scale * rng.normal();
  return f;
}

inline deform::Date ymd(int y, unsigned m, unsigned d) {
  return deform::Date{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
}

/// Cube on a small grid whose pixel (r, c) at epoch t holds fn(r, c, days_t).
template <typename Fn>
deform::DisplacementCube make_cube(deform::Index h, deform::Index w, deform::Index t, int cadence, Fn fn) {
  deform::DisplacementCube cube;
  cube.grid = deform::GridSpec::for_tile(deform::TileId{32, 34}, h, w);
  cube.calendar = deform::AcquisitionCalendar::regular(ymd(2018, 1, 1), t, cadence);
  for (deform::Index k = 0; k < t; ++k) {
    deform::Frame f(h, w);
    const double days = cube.calendar.epoch_days()[k];
    for (deform::Index r = 0; r < h; ++r)
      for (deform::Index c = 0; c < w; ++c) f(r, c) = fn(r, c, days);
    cube.frames.push_back(f);
  }
  return cube;
}

/// Normal-equation least squares solved through an explicit inverse, independent of the QR path.
inline deform::Matrix normal_equations(const deform::Matrix& x, const deform::Matrix& y) {
  const deform::Matrix xtx = x.transpose() * x;
  return xtx.inverse() * (x.transpose() * y);
}

}  // namespace testing
