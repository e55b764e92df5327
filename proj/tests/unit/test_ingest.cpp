#include "doctest.h"

#include "deform/ingest.hpp"
#include "support.hpp"

#include <cmath>

using namespace deform;
using testing::TempDir;
using testing::write_text;
using testing::ymd;

TEST_CASE("tile labels parse and round-trip") {
  const TileId t = parse_tile_id("E32N34");
  CHECK(t.easting_100km == 32);
  CHECK(t.northing_100km == 34);
  CHECK(t.label() == "E32N34");

  const TileId z = parse_tile_id("E00N00");
  CHECK(z.easting_100km == 0);
  CHECK(z.northing_100km == 0);
  CHECK(z.label() == "E00N00");
}

TEST_CASE("malformed tile labels report the offending position") {
  auto position = [](std::string_view s) -> std::size_t {
    try {
      parse_tile_id(s);
    } catch (const ParseError& e) {
      return e.position();
    }
    return 999;
  };
  CHECK(position("X32N34") == 0);
  CHECK(position("E3xN34") == 2);
  CHECK(position("E32X34") == 3);
  CHECK(position("E32N3") != 999);
  CHECK(position("E32N345") != 999);
}

TEST_CASE("tile id from an EGMS file name") {
  auto t = tile_id_from_filename("/data/EGMS_L3_E44N25_100km_U_2018_2022_1.csv");
  REQUIRE(t.has_value());
  CHECK(t->label() == "E44N25");
  CHECK_FALSE(tile_id_from_filename("points.csv").has_value());
  CHECK(l3_filename(TileId{32, 34}) == "EGMS_L3_E32N34_100km_U_2018_2022_1.csv");
}

TEST_CASE("tile extent check") {
  const TileId t{32, 34};
  CHECK(t.contains(3250000.0, 3450000.0));
  CHECK_FALSE(t.contains(3150000.0, 3450000.0));
  CHECK_FALSE(t.contains(3250000.0, 3550000.5));
}

TEST_CASE("dates in several header formats") {
  CHECK(parse_date("20180105") == ymd(2018, 1, 5));
  CHECK(parse_date("2018-01-05") == ymd(2018, 1, 5));
  CHECK(parse_date("2018/01/05") == ymd(2018, 1, 5));
  CHECK(parse_date("\"20180105\"") == ymd(2018, 1, 5));
  CHECK_FALSE(parse_date("20181305").has_value());
  CHECK_FALSE(parse_date("easting").has_value());
  CHECK(format_date_compact(ymd(2019, 12, 31)) == "20191231");
  CHECK(format_date_iso(ymd(2019, 12, 31)) == "2019-12-31");
  CHECK(day_of_year(ymd(2019, 1, 1)) == 0);
  CHECK(day_of_year(ymd(2019, 12, 31)) == 364);
  CHECK(day_of_year(ymd(2020, 12, 31)) == 365);
}

TEST_CASE("calendars are strictly increasing") {
  const auto cal = AcquisitionCalendar::regular(ymd(2018, 1, 1), 5, 6);
  CHECK(cal.size() == 5);
  CHECK(cal.epoch_days() == std::vector<double>{0, 6, 12, 18, 24});
  CHECK(cal.head(3).size() == 3);
  CHECK_THROWS(AcquisitionCalendar({ymd(2018, 1, 1), ymd(2018, 1, 1)}));
  CHECK_THROWS(AcquisitionCalendar({ymd(2018, 1, 7), ymd(2018, 1, 1)}));
  CHECK_THROWS(AcquisitionCalendar({ymd(2018, 1, 1)}));
}

namespace {
const char* kFixture =
    "pid,easting,northing,height,20180101,20180107,20180113,20180119\n"
    "1,3210000,3420000,100,0.0,1.5,-2.25,3.0\n"
    "2,3220000,3430000,101,1.0,2.0,3.0,4.0\n"
    "3,3230000,3410000,102,-1.0,-2.0,-3.0,-4.0\n";
}

TEST_CASE("load a three-point fixture") {
  TempDir dir("ingest");
  const auto path = dir / "EGMS_L3_E32N34_100km_U_2018_2022_1.csv";
  write_text(path, kFixture);
  LoadReport report;
  const auto s = load_l3_csv(path, &report);
  CHECK(s.tile.label() == "E32N34");
  CHECK(s.points.size() == 3);
  CHECK(s.calendar.size() == 4);
  CHECK(report.rows_read == 3);
  CHECK(report.skipped.empty());
  CHECK(s.points[0].displacement_mm[2] == -2.25);
  CHECK(s.points[2].easting_m == 3230000.0);
}

TEST_CASE("a non-numeric cell skips the row and reports it") {
  TempDir dir("ingest");
  const auto path = dir / "EGMS_L3_E32N34_100km_U_2018_2022_1.csv";
  write_text(path,
             "pid,easting,northing,20180101,20180107,20180113,20180119\n"
             "1,3210000,3420000,0.0,1.5,-2.25,3.0\n"
             "2,3220000,3430000,1.0,abc,3.0,4.0\n"
             "3,3230000,3410000,-1.0,-2.0,-3.0,-4.0\n");
  LoadReport report;
  const auto s = load_l3_csv(path, &report);
  CHECK(s.points.size() == 2);
  REQUIRE(report.skipped.size() == 1);
  CHECK(report.skipped[0].row == 2);
}

TEST_CASE("empty cells are missing, outside points are skipped") {
  TempDir dir("ingest");
  const auto path = dir / "EGMS_L3_E32N34_100km_U_2018_2022_1.csv";
  write_text(path,
             "easting,northing,20180101,20180107,20180113\n"
             "3210000,3420000,0.0,,3.0\n"
             "9990000,3420000,0.0,1.0,3.0\n");
  LoadReport report;
  const auto s = load_l3_csv(path, &report);
  REQUIRE(s.points.size() == 1);
  CHECK(std::isnan(s.points[0].displacement_mm[1]));
  REQUIRE(report.skipped.size() == 1);
  CHECK(report.skipped[0].row == 2);
}

TEST_CASE("unordered date headers are sorted with their columns") {
  TempDir dir("ingest");
  const auto shuffled = dir / "shuffled.csv";
  const auto sorted = dir / "sorted.csv";
  write_text(shuffled,
             "easting,northing,20180113,20180101,20180119,20180107\n"
             "3210000,3420000,-2.25,0.0,3.0,1.5\n"
             "3220000,3430000,3.0,1.0,4.0,2.0\n");
  write_text(sorted,
             "easting,northing,20180101,20180107,20180113,20180119\n"
             "3210000,3420000,0.0,1.5,-2.25,3.0\n"
             "3220000,3430000,1.0,2.0,3.0,4.0\n");
  const auto a = load_l3_csv(shuffled);
  const auto b = load_l3_csv(sorted);
  CHECK(a.calendar.dates() == b.calendar.dates());
  REQUIRE(a.points.size() == b.points.size());
  for (std::size_t i = 0; i < a.points.size(); ++i)
    CHECK(a.points[i].displacement_mm == b.points[i].displacement_mm);
}

TEST_CASE("header errors") {
  TempDir dir("ingest");
  write_text(dir / "a.csv", "x,northing,20180101,20180107\n1,2,3,4\n");
  CHECK_THROWS_WITH_AS(load_l3_csv(dir / "a.csv"), doctest::Contains("easting"), Error);
  write_text(dir / "b.csv", "easting,northing,20180101\n1,2,3\n");
  CHECK_THROWS_WITH_AS(load_l3_csv(dir / "b.csv"), doctest::Contains("2 date columns"), Error);
  CHECK_THROWS_AS(load_l3_csv(dir / "missing.csv"), Error);
}

TEST_CASE("csv round trip is exact") {
  TempDir dir("ingest");
  Rng rng(5);
  PointCloudSeries s;
  s.tile = TileId{32, 34};
  s.calendar = AcquisitionCalendar::regular(ymd(2018, 3, 1), 7, 6);
  for (int i = 0; i < 25; ++i) {
    PointRecord p;
    p.easting_m = 3200000.0 + rng.uniform() * 100000.0;
    p.northing_m = 3400000.0 + rng.uniform() * 100000.0;
    for (int t = 0; t < 7; ++t) p.displacement_mm.push_back(rng.normal(0.0, 10.0));
    s.points.push_back(p);
  }
  s.points[3].displacement_mm[4] = std::nan("");
  const auto path = dir / l3_filename(s.tile);
  write_l3_csv(s, path);
  const auto back = load_l3_csv(path);
  CHECK(back.tile == s.tile);
  CHECK(back.calendar.dates() == s.calendar.dates());
  REQUIRE(back.points.size() == s.points.size());
  for (std::size_t i = 0; i < s.points.size(); ++i) {
    CHECK(back.points[i].easting_m == s.points[i].easting_m);
    CHECK(back.points[i].northing_m == s.points[i].northing_m);
    for (std::size_t t = 0; t < 7; ++t) {
      const double x = s.points[i].displacement_mm[t];
      const double y = back.points[i].displacement_mm[t];
      if (std::isnan(x))
        CHECK(std::isnan(y));
      else
        CHECK(x == y);
    }
  }
  const auto path2 = dir / "again.csv";
  write_l3_csv(back, path2);
  CHECK(testing::read_text(path) == testing::read_text(path2));
}

TEST_CASE("gap filling interpolates in time and drops sparse points") {
  PointCloudSeries s;
  s.calendar = AcquisitionCalendar({ymd(2018, 1, 1), ymd(2018, 1, 7), ymd(2018, 1, 19), ymd(2018, 1, 25),
                                    ymd(2018, 1, 31)});
  const double nan = std::nan("");
  s.points.push_back({0, 0, {nan, 2.0, nan, 8.0, 10.0}});
  s.points.push_back({0, 0, {1.0, 1.0, 1.0, 1.0, nan}});
  s.points.push_back({0, 0, {nan, nan, 1.0, 1.0, 1.0}});
  const auto r = fill_missing(s, 0.4);
  CHECK(r.dropped_points == 0);
  CHECK(r.filled_cells == 5);
  // day 0 takes the first valid value; day 18 sits 12/18 of the way from day 6 to day 24
  CHECK(s.points[0].displacement_mm[0] == 2.0);
  CHECK(s.points[0].displacement_mm[2] == doctest::Approx(2.0 + 6.0 * 12.0 / 18.0).epsilon(1e-14));
  CHECK(s.points[1].displacement_mm[4] == 1.0);

  PointCloudSeries t = s;
  t.points[2].displacement_mm = {nan, nan, nan, 1.0, 1.0};
  const auto r2 = fill_missing(t, 0.2);
  CHECK(r2.dropped_points == 1);
  CHECK(t.points.size() == 2);
}
