#include "deform/ingest.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <regex>
#include <sstream>

namespace deform {
namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '"')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '"' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      cells.push_back(trim(line.substr(start, i - start)));
      start = i + 1;
    }
  }
  return cells;
}

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

bool is_missing_token(std::string_view cell) {
  if (cell.empty()) return true;
  const std::string l = lower(cell);
  return l == "nan" || l == "na" || l == "null";
}

std::optional<double> parse_number(std::string_view cell) {
  double value = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  if (first != last && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc{} || ptr != last || !std::isfinite(value)) return std::nullopt;
  return value;
}

bool all_digits(std::string_view s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

int to_int(std::string_view s) {
  int v = 0;
  std::from_chars(s.data(), s.data() + s.size(), v);
  return v;
}

}  // namespace

std::string TileId::label() const {
  char buf[16];
  std::snprintf(buf, sizeof buf, "E%02dN%02d", easting_100km, northing_100km);
  return buf;
}

bool TileId::contains(double easting_m, double northing_m) const {
  return easting_m >= origin_easting_m() && easting_m <= origin_easting_m() + 100000.0 &&
         northing_m >= origin_northing_m() && northing_m <= origin_northing_m() + 100000.0;
}

TileId parse_tile_id(std::string_view label) {
  // 'd' stands for any decimal digit.
  static constexpr char expected[6] = {'E', 'd', 'd', 'N', 'd', 'd'};
  for (std::size_t i = 0; i < 6; ++i) {
    if (i >= label.size())
      throw ParseError("tile id '" + std::string(label) + "': too short at position " + std::to_string(i), i);
    const char c = label[i];
    const bool ok = expected[i] == 'd' ? (c >= '0' && c <= '9') : c == expected[i];
    if (!ok)
      throw ParseError("tile id '" + std::string(label) + "': unexpected character at position " +
                           std::to_string(i),
                       i);
  }
  if (label.size() != 6)
    throw ParseError("tile id '" + std::string(label) + "': trailing characters at position 6", 6);
  return TileId{to_int(label.substr(1, 2)), to_int(label.substr(4, 2))};
}

std::optional<TileId> tile_id_from_filename(const std::filesystem::path& path) {
  static const std::regex pattern("E[0-9]{2}N[0-9]{2}");
  const std::string name = path.filename().string();
  std::smatch m;
  if (std::regex_search(name, m, pattern)) return parse_tile_id(m.str());
  return std::nullopt;
}

std::optional<Date> parse_date(std::string_view text) {
  text = trim(text);
  std::string_view y, mo, d;
  if (text.size() == 8 && all_digits(text)) {
    y = text.substr(0, 4);
    mo = text.substr(4, 2);
    d = text.substr(6, 2);
  } else if (text.size() == 10 && (text[4] == '-' || text[4] == '/') && text[7] == text[4]) {
    y = text.substr(0, 4);
    mo = text.substr(5, 2);
    d = text.substr(8, 2);
    if (!all_digits(y) || !all_digits(mo) || !all_digits(d)) return std::nullopt;
  } else {
    return std::nullopt;
  }
  const Date date{std::chrono::year{to_int(y)}, std::chrono::month{static_cast<unsigned>(to_int(mo))},
                  std::chrono::day{static_cast<unsigned>(to_int(d))}};
  if (!date.ok()) return std::nullopt;
  return date;
}

std::string format_date_compact(const Date& d) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d%02u%02u", static_cast<int>(d.year()), static_cast<unsigned>(d.month()),
                static_cast<unsigned>(d.day()));
  return buf;
}

std::string format_date_iso(const Date& d) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(d.year()), static_cast<unsigned>(d.month()),
                static_cast<unsigned>(d.day()));
  return buf;
}

int day_of_year(const Date& d) {
  using namespace std::chrono;
  const sys_days jan1{d.year() / January / 1};
  return static_cast<int>((sys_days{d} - jan1).count());
}

AcquisitionCalendar::AcquisitionCalendar(std::vector<Date> dates) : dates_(std::move(dates)) {
  using namespace std::chrono;
  if (dates_.size() < 2) throw Error("calendar needs at least 2 epochs, got " + std::to_string(dates_.size()));
  epoch_days_.reserve(dates_.size());
  const sys_days first{dates_.front()};
  for (std::size_t i = 0; i < dates_.size(); ++i) {
    if (!dates_[i].ok()) throw Error("calendar: invalid date at epoch " + std::to_string(i));
    if (i > 0 && sys_days{dates_[i]} <= sys_days{dates_[i - 1]})
      throw Error("calendar: dates not strictly increasing at epoch " + std::to_string(i) + " (" +
                  format_date_iso(dates_[i]) + ")");
    epoch_days_.push_back(static_cast<double>((sys_days{dates_[i]} - first).count()));
  }
}

AcquisitionCalendar AcquisitionCalendar::regular(const Date& start, Index count, int cadence_days) {
  using namespace std::chrono;
  std::vector<Date> dates;
  dates.reserve(count);
  for (Index i = 0; i < count; ++i) dates.emplace_back(sys_days{start} + days{cadence_days * i});
  return AcquisitionCalendar(std::move(dates));
}

AcquisitionCalendar AcquisitionCalendar::head(Index count) const {
  return AcquisitionCalendar(std::vector<Date>(dates_.begin(), dates_.begin() + count));
}

std::string l3_filename(const TileId& tile) {
  return "EGMS_L3_" + tile.label() + "_100km_U_2018_2022_1.csv";
}

PointCloudSeries load_l3_csv(const std::filesystem::path& path, LoadReport* report) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open L3 CSV: " + path.string());

  std::string header_line;
  if (!std::getline(in, header_line)) throw Error("L3 CSV is empty: " + path.string());
  if (header_line.size() >= 3 && static_cast<unsigned char>(header_line[0]) == 0xEF) header_line.erase(0, 3);
  const auto header = split_csv(header_line);

  Index easting_col = -1;
  Index northing_col = -1;
  std::vector<std::pair<Date, Index>> date_cols;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const std::string name = lower(header[c]);
    if (name == "easting") {
      easting_col = static_cast<Index>(c);
    } else if (name == "northing") {
      northing_col = static_cast<Index>(c);
    } else if (auto d = parse_date(header[c])) {
      date_cols.emplace_back(*d, static_cast<Index>(c));
    }
  }
  std::vector<std::string> missing;
  if (easting_col < 0) missing.push_back("easting");
  if (northing_col < 0) missing.push_back("northing");
  if (!missing.empty()) {
    std::string names;
    for (const auto& m : missing) names += (names.empty() ? "" : ",") + m;
    throw Error("L3 CSV " + path.string() + ": missing coordinate column(s): " + names);
  }
  if (date_cols.size() < 2)
    throw Error("L3 CSV " + path.string() + ": need at least 2 date columns, found " +
                std::to_string(date_cols.size()));

  std::stable_sort(date_cols.begin(), date_cols.end(), [](const auto& a, const auto& b) {
    return std::chrono::sys_days{a.first} < std::chrono::sys_days{b.first};
  });
  std::vector<Date> dates;
  for (const auto& dc : date_cols) dates.push_back(dc.first);
  AcquisitionCalendar calendar(std::move(dates));

  struct Row {
    Index index;
    double e, n;
    std::vector<double> values;
  };
  std::vector<Row> rows;
  LoadReport local;
  std::string line;
  Index row_index = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    ++row_index;
    const auto cells = split_csv(line);
    auto skip = [&](std::string msg) { local.skipped.push_back({row_index, std::move(msg)}); };
    if (cells.size() != header.size()) {
      skip("expected " + std::to_string(header.size()) + " cells, got " + std::to_string(cells.size()));
      continue;
    }
    const auto e = parse_number(cells[easting_col]);
    const auto n = parse_number(cells[northing_col]);
    if (!e || !n) {
      skip("non-numeric coordinate");
      continue;
    }
    Row row{row_index, *e, *n, {}};
    row.values.reserve(date_cols.size());
    bool bad = false;
    for (const auto& [date, col] : date_cols) {
      const auto cell = cells[col];
      if (is_missing_token(cell)) {
        row.values.push_back(std::numeric_limits<double>::quiet_NaN());
      } else if (auto v = parse_number(cell)) {
        row.values.push_back(*v);
      } else {
        skip("non-numeric displacement in column '" + std::string(header[col]) + "'");
        bad = true;
        break;
      }
    }
    if (!bad) rows.push_back(std::move(row));
  }
  local.rows_read = row_index;

  PointCloudSeries series;
  series.calendar = std::move(calendar);
  if (auto tile = tile_id_from_filename(path)) {
    series.tile = *tile;
  } else if (!rows.empty()) {
    series.tile = TileId{static_cast<int>(std::floor(rows.front().e / 100000.0)),
                         static_cast<int>(std::floor(rows.front().n / 100000.0))};
  }
  for (auto& row : rows) {
    if (!series.tile.contains(row.e, row.n)) {
      local.skipped.push_back({row.index, "coordinates outside tile " + series.tile.label()});
      continue;
    }
    series.points.push_back(PointRecord{row.e, row.n, std::move(row.values)});
  }
  std::sort(local.skipped.begin(), local.skipped.end(),
            [](const RowIssue& a, const RowIssue& b) { return a.row < b.row; });
  if (report) *report = std::move(local);
  return series;
}

void write_l3_csv(const PointCloudSeries& series, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write L3 CSV: " + path.string());
  out << "pid,easting,northing";
  for (const auto& d : series.calendar.dates()) out << ',' << format_date_compact(d);
  out << '\n';
  char buf[64];
  for (std::size_t i = 0; i < series.points.size(); ++i) {
    const auto& p = series.points[i];
    out << i;
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g", p.easting_m, p.northing_m);
    out << buf;
    for (double v : p.displacement_mm) {
      if (std::isnan(v)) {
        out << ',';
      } else {
        std::snprintf(buf, sizeof buf, ",%.17g", v);
        out << buf;
      }
    }
    out << '\n';
  }
}

FillReport fill_missing(PointCloudSeries& series, double max_missing_fraction) {
  FillReport report;
  const auto& t = series.calendar.epoch_days();
  std::vector<PointRecord> kept;
  kept.reserve(series.points.size());
  for (auto& p : series.points) {
    auto& v = p.displacement_mm;
    const Index n = static_cast<Index>(v.size());
    std::vector<Index> valid;
    for (Index i = 0; i < n; ++i)
      if (!std::isnan(v[i])) valid.push_back(i);
    const Index missing = n - static_cast<Index>(valid.size());
    if (valid.empty() || static_cast<double>(missing) > max_missing_fraction * static_cast<double>(n)) {
      ++report.dropped_points;
      continue;
    }
    if (missing > 0) {
      std::size_t k = 0;
      for (Index i = 0; i < n; ++i) {
        if (!std::isnan(v[i])) continue;
        while (k + 1 < valid.size() && valid[k + 1] < i) ++k;
        if (i < valid.front()) {
          v[i] = v[valid.front()];
        } else if (i > valid.back()) {
          v[i] = v[valid.back()];
        } else {
          const Index a = valid[k];
          const Index b = valid[k + 1];
          const double w = (t[i] - t[a]) / (t[b] - t[a]);
          v[i] = (1.0 - w) * v[a] + w * v[b];
        }
        ++report.filled_cells;
      }
    }
    kept.push_back(std::move(p));
  }
  series.points = std::move(kept);
  return report;
}

}  // namespace deform
