#pragma once

#include "deform/common.hpp"

#include <chrono>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace deform {

/// EGMS 100 km tile label "EXXNYY" (EPSG:3035, units of 100 km).
struct TileId {
  int easting_100km = 0;
  int northing_100km = 0;

  std::string label() const;
  double origin_easting_m() const { return easting_100km * 100000.0; }
  double origin_northing_m() const { return northing_100km * 100000.0; }
  bool contains(double easting_m, double northing_m) const;

  friend bool operator==(const TileId&, const TileId&) = default;
};

/// Throws ParseError carrying the offending character position.
TileId parse_tile_id(std::string_view label);

/// Finds an "EXXNYY" token in an EGMS file name (e.g. EGMS_L3_E32N34_100km_U_2018_2022_1.csv).
std::optional<TileId> tile_id_from_filename(const std::filesystem::path& path);

using Date = std::chrono::year_month_day;

/// Accepts YYYYMMDD, YYYY-MM-DD and YYYY/MM/DD (optionally quoted).
std::optional<Date> parse_date(std::string_view text);
std::string format_date_compact(const Date& d);  // YYYYMMDD
std::string format_date_iso(const Date& d);      // YYYY-MM-DD

/// Zero-based day of year (Jan 1 -> 0).
int day_of_year(const Date& d);

class AcquisitionCalendar {
 public:
  AcquisitionCalendar() = default;
  /// Requires strictly increasing dates and at least two epochs.
  explicit AcquisitionCalendar(std::vector<Date> dates);

  static AcquisitionCalendar regular(const Date& start, Index count, int cadence_days);

  Index size() const { return static_cast<Index>(dates_.size()); }
  const std::vector<Date>& dates() const { return dates_; }
  /// Days elapsed since the first acquisition.
  const std::vector<double>& epoch_days() const { return epoch_days_; }

  AcquisitionCalendar head(Index count) const;

 private:
  std::vector<Date> dates_;
  std::vector<double> epoch_days_;
};

struct PointRecord {
  double easting_m = 0.0;
  double northing_m = 0.0;
  /// One value per epoch; NaN marks a missing observation.
  std::vector<double> displacement_mm;
};

struct PointCloudSeries {
  TileId tile;
  AcquisitionCalendar calendar;
  std::vector<PointRecord> points;
};

struct RowIssue {
  Index row = 0;  // 1-based data row (header excluded)
  std::string message;
};

struct LoadReport {
  Index rows_read = 0;
  std::vector<RowIssue> skipped;
};

/// Parses an EGMS L3 Up-component CSV. Rows with malformed cells or coordinates
/// outside the tile are skipped and listed in `report`. Displacement columns are
/// reordered so the calendar is ascending.
PointCloudSeries load_l3_csv(const std::filesystem::path& path, LoadReport* report = nullptr);

void write_l3_csv(const PointCloudSeries& series, const std::filesystem::path& path);

/// Canonical EGMS file name for a tile.
std::string l3_filename(const TileId& tile);

struct FillReport {
  Index dropped_points = 0;
  Index filled_cells = 0;
};

/// Drops points with more than `max_missing_fraction` missing epochs and fills the
/// rest by per-point linear interpolation in time (constant beyond the ends).
FillReport fill_missing(PointCloudSeries& series, double max_missing_fraction = 0.2);

}  // namespace deform
