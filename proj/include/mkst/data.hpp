#pragma once

// Hourly energy / weather ingestion, alignment, normalization and sliding
// window construction.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mkst/config.hpp"
#include "mkst/errors.hpp"
#include "mkst/tensor.hpp"

namespace mkst::data {

using Instant = std::chrono::sys_seconds;
using std::chrono::hours;

/// Parses `YYYY-MM-DDTHH:MM[:SS][Z|+00:00]` (a space may replace `T`) or a
/// bare `YYYY-MM-DD`, read as midnight UTC.
inline std::optional<Instant> parse_instant(std::string_view text) {
  std::string s = trim(text);
  if (s.size() == 10) s += "T00:00";
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, sec = 0;
  char sep = 0;
  int consumed = 0;
  const int n = std::sscanf(s.c_str(), "%4d-%2d-%2d%c%2d:%2d%n", &y, &mo, &d, &sep, &h, &mi, &consumed);
  if (n < 6 || (sep != 'T' && sep != ' ')) return std::nullopt;
  std::string_view rest = std::string_view(s).substr(static_cast<std::size_t>(consumed));
  if (!rest.empty() && rest.front() == ':') {
    int used = 0;
    if (std::sscanf(std::string(rest).c_str(), ":%2d%n", &sec, &used) != 1) return std::nullopt;
    rest.remove_prefix(static_cast<std::size_t>(used));
  }
  if (!(rest.empty() || rest == "Z" || rest == "+00:00" || rest == "+0000")) return std::nullopt;
  using namespace std::chrono;
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok() || h > 23 || mi > 59 || sec > 59) return std::nullopt;
  return sys_days{ymd} + hours{h} + minutes{mi} + seconds{sec};
}

inline std::string format_instant(Instant t) {
  using namespace std::chrono;
  const auto day_start = floor<days>(t);
  const year_month_day ymd{day_start};
  const hh_mm_ss hms{t - day_start};
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d-%02u-%02uT%02d:%02d:%02dZ", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                static_cast<int>(hms.hours().count()), static_cast<int>(hms.minutes().count()),
                static_cast<int>(hms.seconds().count()));
  return buf;
}

inline Instant require_instant(std::string_view text, const std::string& what) {
  auto t = parse_instant(text);
  if (!t) throw ValidationError(what + ": cannot parse timestamp `" + std::string(text) + "`");
  return *t;
}

struct EnergySeries {
  std::string site_id;
  std::vector<Instant> timestamps;
  std::vector<double> values;
};

struct WeatherSeries {
  std::string location_id;
  std::vector<Instant> timestamps;
  std::vector<std::string> variable_names;
  std::vector<double> values;  // [time x D_W], row-major

  std::size_t variable_count() const { return variable_names.size(); }
  double at(std::size_t t, std::size_t v) const { return values[t * variable_names.size() + v]; }
};

enum class GapPolicy { reject, interpolate };

struct SchemaConfig {
  std::vector<std::string> weather_variables;  // empty: take from the CSV header
  GapPolicy gap_policy = GapPolicy::reject;
  std::size_t max_gap_hours = 3;
};

struct IngestReport {
  std::vector<std::string> rejected_rows;
  std::size_t interpolated_points = 0;
};

struct IngestResult {
  std::vector<EnergySeries> energy;
  std::vector<WeatherSeries> weather;
  IngestReport report;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(trim(field));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::optional<double> parse_double(const std::string& s) {
  if (s.empty()) return std::nullopt;
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size() || !std::isfinite(v)) return std::nullopt;
    return v;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

struct RawRows {
  std::vector<std::string> header;
  std::vector<std::pair<std::size_t, std::vector<std::string>>> rows;  // (line number, fields)
};

inline RawRows read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  RawRows r;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    auto fields = split_csv_line(line);
    if (r.header.empty())
      r.header = std::move(fields);
    else
      r.rows.emplace_back(line_no, std::move(fields));
  }
  if (r.header.empty() || r.rows.empty()) throw ValidationError("empty file: " + path.string());
  return r;
}

struct Point {
  Instant time;
  std::vector<double> values;
};

// Sorts, rejects duplicates, checks hourly spacing and fills or rejects gaps.
inline std::vector<Point> regularize(std::vector<Point> pts, const std::string& id, const SchemaConfig& schema,
                                     IngestReport& report) {
  std::sort(pts.begin(), pts.end(), [](const Point& a, const Point& b) { return a.time < b.time; });
  std::vector<Point> out;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto since_epoch = pts[i].time.time_since_epoch();
    if (since_epoch % hours{1} != std::chrono::seconds{0})
      throw ValidationError("timeline misalignment: `" + id + "` has a timestamp off the hourly grid (" +
                            format_instant(pts[i].time) + ")");
    if (!out.empty()) {
      const auto step = pts[i].time - out.back().time;
      if (step == std::chrono::seconds{0})
        throw ValidationError("duplicate timestamp " + format_instant(pts[i].time) + " for `" + id + "`");
      const auto missing = static_cast<std::size_t>(step / hours{1}) - 1;
      if (missing > 0) {
        if (schema.gap_policy == GapPolicy::reject || missing > schema.max_gap_hours)
          throw ValidationError("gap of " + std::to_string(missing) + " hour(s) in `" + id + "` after " +
                                format_instant(out.back().time));
        const Point a = out.back();
        const Point& b = pts[i];
        for (std::size_t g = 1; g <= missing; ++g) {
          const double w = static_cast<double>(g) / static_cast<double>(missing + 1);
          Point p{a.time + hours{static_cast<long>(g)}, a.values};
          for (std::size_t v = 0; v < p.values.size(); ++v) p.values[v] = (1 - w) * a.values[v] + w * b.values[v];
          out.push_back(std::move(p));
          ++report.interpolated_points;
        }
      }
    }
    out.push_back(std::move(pts[i]));
  }
  return out;
}

}  // namespace detail

/// Reads energy (`timestamp,site_id,value`) and weather
/// (`timestamp,location_id,var_1..var_Dw`) CSVs and returns series on a
/// common hourly timeline. Rows with unparseable fields are skipped and listed
/// in the report; the resulting holes follow the gap policy.
inline IngestResult ingest(const std::vector<std::filesystem::path>& energy_files,
                           const std::vector<std::filesystem::path>& weather_files, const SchemaConfig& schema = {}) {
  IngestResult result;
  std::map<std::string, std::vector<detail::Point>> energy_pts;
  std::vector<std::string> energy_order;
  std::map<std::string, std::string> energy_origin;

  if (energy_files.empty()) throw ValidationError("no energy files given");
  if (weather_files.empty()) throw ValidationError("no weather files given");

  for (const auto& file : energy_files) {
    auto raw = detail::read_csv(file);
    if (raw.header != std::vector<std::string>{"timestamp", "site_id", "value"})
      throw ValidationError("schema mismatch in " + file.string() + ": expected header `timestamp,site_id,value`");
    std::set<std::string> seen_here;
    for (auto& [line, f] : raw.rows) {
      const std::string where = file.string() + ":" + std::to_string(line);
      if (f.size() != 3) {
        result.report.rejected_rows.push_back(where + ": expected 3 fields, got " + std::to_string(f.size()));
        continue;
      }
      auto t = parse_instant(f[0]);
      auto v = detail::parse_double(f[2]);
      if (!t || !v || f[1].empty()) {
        result.report.rejected_rows.push_back(where + ": unparseable row");
        continue;
      }
      const std::string& site = f[1];
      if (!seen_here.count(site)) {
        auto it = energy_origin.find(site);
        if (it != energy_origin.end() && it->second != file.string())
          throw ValidationError("duplicate site id `" + site + "` in " + file.string() + " and " + it->second);
        if (it == energy_origin.end()) {
          energy_origin[site] = file.string();
          energy_order.push_back(site);
        }
        seen_here.insert(site);
      }
      energy_pts[site].push_back({*t, {*v}});
    }
  }

  std::map<std::string, std::vector<detail::Point>> weather_pts;
  std::vector<std::string> weather_order;
  std::map<std::string, std::string> weather_origin;
  std::vector<std::string> var_names;
  for (const auto& file : weather_files) {
    auto raw = detail::read_csv(file);
    if (raw.header.size() < 3 || raw.header[0] != "timestamp" || raw.header[1] != "location_id")
      throw ValidationError("schema mismatch in " + file.string() +
                            ": expected header `timestamp,location_id,var_1,...`");
    std::vector<std::string> names(raw.header.begin() + 2, raw.header.end());
    if (!schema.weather_variables.empty() && names != schema.weather_variables)
      throw ValidationError("schema mismatch in " + file.string() + ": weather variables do not match the declared list");
    if (var_names.empty())
      var_names = names;
    else if (names != var_names)
      throw ValidationError("schema mismatch in " + file.string() + ": weather variables differ between files");
    const std::size_t nvar = names.size();
    std::set<std::string> seen_here;
    for (auto& [line, f] : raw.rows) {
      const std::string where = file.string() + ":" + std::to_string(line);
      if (f.size() != nvar + 2) {
        result.report.rejected_rows.push_back(where + ": expected " + std::to_string(nvar + 2) + " fields");
        continue;
      }
      auto t = parse_instant(f[0]);
      std::vector<double> vals;
      bool ok = t.has_value() && !f[1].empty();
      for (std::size_t v = 0; ok && v < nvar; ++v) {
        auto x = detail::parse_double(f[v + 2]);
        ok = x.has_value();
        if (ok) vals.push_back(*x);
      }
      if (!ok) {
        result.report.rejected_rows.push_back(where + ": unparseable row");
        continue;
      }
      const std::string& loc = f[1];
      if (!seen_here.count(loc)) {
        auto it = weather_origin.find(loc);
        if (it != weather_origin.end() && it->second != file.string())
          throw ValidationError("duplicate location id `" + loc + "` in " + file.string() + " and " + it->second);
        if (it == weather_origin.end()) {
          weather_origin[loc] = file.string();
          weather_order.push_back(loc);
        }
        seen_here.insert(loc);
      }
      weather_pts[loc].push_back({*t, std::move(vals)});
    }
  }

  for (const auto& site : energy_order) {
    auto pts = detail::regularize(std::move(energy_pts[site]), site, schema, result.report);
    EnergySeries s{site, {}, {}};
    for (auto& p : pts) {
      s.timestamps.push_back(p.time);
      s.values.push_back(p.values[0]);
    }
    result.energy.push_back(std::move(s));
  }
  for (const auto& loc : weather_order) {
    auto pts = detail::regularize(std::move(weather_pts[loc]), loc, schema, result.report);
    WeatherSeries w{loc, {}, var_names, {}};
    for (auto& p : pts) {
      w.timestamps.push_back(p.time);
      w.values.insert(w.values.end(), p.values.begin(), p.values.end());
    }
    result.weather.push_back(std::move(w));
  }

  if (result.energy.empty()) throw ValidationError("no valid energy rows in the given files");
  if (result.weather.empty()) throw ValidationError("no valid weather rows in the given files");

  // Every series must cover exactly the same hours.
  const auto& ref = result.energy.front();
  auto check = [&](const std::string& id, const std::vector<Instant>& ts) {
    if (ts.front() != ref.timestamps.front() || ts.back() != ref.timestamps.back())
      throw ValidationError("timeline misalignment: `" + id + "` spans " + format_instant(ts.front()) + " .. " +
                            format_instant(ts.back()) + " but `" + ref.site_id + "` spans " +
                            format_instant(ref.timestamps.front()) + " .. " + format_instant(ref.timestamps.back()));
  };
  for (const auto& s : result.energy) check(s.site_id, s.timestamps);
  for (const auto& w : result.weather) check(w.location_id, w.timestamps);
  return result;
}

/// Series stacked on their shared timeline.
struct AlignedData {
  std::vector<Instant> timeline;
  std::vector<std::string> site_ids;
  std::vector<std::string> location_ids;
  std::vector<std::string> variable_names;
  Tensor<double> energy;   // [L_E x N]
  Tensor<double> weather;  // [L_W x N x D_W]

  std::size_t length() const { return timeline.size(); }
};

inline AlignedData align(const std::vector<EnergySeries>& energy, const std::vector<WeatherSeries>& weather) {
  if (energy.empty() || weather.empty()) throw ValidationError("align: need at least one energy and one weather series");
  AlignedData d;
  d.timeline = energy.front().timestamps;
  d.variable_names = weather.front().variable_names;
  const std::size_t n = d.timeline.size(), nvar = d.variable_names.size();
  d.energy = Tensor<double>({energy.size(), n});
  d.weather = Tensor<double>({weather.size(), n, nvar});
  for (std::size_t s = 0; s < energy.size(); ++s) {
    if (energy[s].timestamps != d.timeline) throw ValidationError("timeline misalignment for site `" + energy[s].site_id + "`");
    d.site_ids.push_back(energy[s].site_id);
    for (std::size_t t = 0; t < n; ++t) d.energy.at(s, t) = energy[s].values[t];
  }
  for (std::size_t l = 0; l < weather.size(); ++l) {
    if (weather[l].timestamps != d.timeline)
      throw ValidationError("timeline misalignment for location `" + weather[l].location_id + "`");
    if (weather[l].variable_count() != nvar) throw ValidationError("D_W differs for location `" + weather[l].location_id + "`");
    d.location_ids.push_back(weather[l].location_id);
    std::copy(weather[l].values.begin(), weather[l].values.end(), d.weather.data().begin() + l * n * nvar);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Cyclical time features

inline constexpr std::size_t kCyclicalFeatureCount = 6;

/// Meteorological season index: DJF=0, MAM=1, JJA=2, SON=3.
inline unsigned season_of_month(unsigned month) { return (month % 12) / 3; }

/// (cos, sin) pairs for hour-of-day (period 24), month (period 12, 1-based
/// phase) and season (period 4), in that order.
inline std::array<double, kCyclicalFeatureCount> encode_cyclical(Instant t) {
  using namespace std::chrono;
  const auto day_start = floor<days>(t);
  const year_month_day ymd{day_start};
  const double hour = static_cast<double>(duration_cast<hours>(t - day_start).count());
  const unsigned month = static_cast<unsigned>(ymd.month());
  const double two_pi = 2.0 * std::numbers::pi;
  auto pair = [&](double phase, double period) { return std::array<double, 2>{std::cos(two_pi * phase / period), std::sin(two_pi * phase / period)}; };
  const auto h = pair(hour, 24.0);
  const auto m = pair(static_cast<double>(month), 12.0);
  const auto s = pair(static_cast<double>(season_of_month(month)), 4.0);
  return {h[0], h[1], m[0], m[1], s[0], s[1]};
}

/// Appends the cyclical features to every weather location's columns.
inline void append_time_features(AlignedData& d) {
  const std::size_t locs = d.weather.dim(0), n = d.length(), nvar = d.weather.dim(2);
  const std::size_t width = nvar + kCyclicalFeatureCount;
  Tensor<double> w({locs, n, width});
  for (std::size_t t = 0; t < n; ++t) {
    const auto feats = encode_cyclical(d.timeline[t]);
    for (std::size_t l = 0; l < locs; ++l) {
      for (std::size_t v = 0; v < nvar; ++v) w.at(l, t, v) = d.weather.at(l, t, v);
      for (std::size_t f = 0; f < kCyclicalFeatureCount; ++f) w.at(l, t, nvar + f) = feats[f];
    }
  }
  d.weather = std::move(w);
  for (const char* name : {"hour_cos", "hour_sin", "month_cos", "month_sin", "season_cos", "season_sin"})
    d.variable_names.emplace_back(name);
}

// ---------------------------------------------------------------------------
// Normalization

struct NormalizationStats {
  std::vector<double> capacity;             // per energy site
  std::vector<std::vector<double>> mean;    // [location][variable]
  std::vector<std::vector<double>> stddev;  // [location][variable], clamped to 1 if zero
  std::vector<std::string> warnings;
};

/// Weather statistics from timeline indices [begin, end).
inline NormalizationStats compute_stats(const AlignedData& d, std::size_t begin, std::size_t end,
                                        std::vector<double> capacity) {
  if (end <= begin) throw ValidationError("normalization: empty training range");
  NormalizationStats st;
  st.capacity = std::move(capacity);
  if (st.capacity.empty()) st.capacity.assign(d.site_ids.size(), 1.0);
  if (st.capacity.size() != d.site_ids.size()) throw ValidationError("normalization: one capacity per site required");
  for (double c : st.capacity)
    if (!(c > 0)) throw ValidationError("normalization: capacities must be positive");
  const std::size_t locs = d.weather.dim(0), nvar = d.weather.dim(2);
  const double count = static_cast<double>(end - begin);
  st.mean.assign(locs, std::vector<double>(nvar, 0.0));
  st.stddev.assign(locs, std::vector<double>(nvar, 0.0));
  for (std::size_t l = 0; l < locs; ++l)
    for (std::size_t v = 0; v < nvar; ++v) {
      double m = 0;
      for (std::size_t t = begin; t < end; ++t) m += d.weather.at(l, t, v);
      m /= count;
      double var = 0;
      for (std::size_t t = begin; t < end; ++t) var += (d.weather.at(l, t, v) - m) * (d.weather.at(l, t, v) - m);
      double sd = std::sqrt(var / count);
      if (sd == 0.0) {
        st.warnings.push_back("zero variance for `" + d.variable_names[v] + "` at location `" + d.location_ids[l] +
                              "`; stddev clamped to 1");
        sd = 1.0;
      }
      st.mean[l][v] = m;
      st.stddev[l][v] = sd;
    }
  return st;
}

inline void normalize(AlignedData& d, const NormalizationStats& st) {
  for (std::size_t s = 0; s < d.energy.dim(0); ++s)
    for (std::size_t t = 0; t < d.length(); ++t) d.energy.at(s, t) /= st.capacity[s];
  for (std::size_t l = 0; l < d.weather.dim(0); ++l)
    for (std::size_t t = 0; t < d.length(); ++t)
      for (std::size_t v = 0; v < st.mean[l].size(); ++v)
        d.weather.at(l, t, v) = (d.weather.at(l, t, v) - st.mean[l][v]) / st.stddev[l][v];
}

inline void denormalize(AlignedData& d, const NormalizationStats& st) {
  for (std::size_t s = 0; s < d.energy.dim(0); ++s)
    for (std::size_t t = 0; t < d.length(); ++t) d.energy.at(s, t) *= st.capacity[s];
  for (std::size_t l = 0; l < d.weather.dim(0); ++l)
    for (std::size_t t = 0; t < d.length(); ++t)
      for (std::size_t v = 0; v < st.mean[l].size(); ++v)
        d.weather.at(l, t, v) = d.weather.at(l, t, v) * st.stddev[l][v] + st.mean[l][v];
}

// ---------------------------------------------------------------------------
// Windows

template <typename T>
struct ForecastSample {
  Tensor<T> energy_history;   // [L_E x T_h x 1]
  Tensor<T> weather_history;  // [L_W x T_h x D_W]
  Tensor<T> weather_future;   // [L_W x T_f x D_W]
  Tensor<T> target;           // [L_E x T_f x 1]; empty when unknown
  Instant issue_time{};

  bool has_target() const { return !target.empty(); }
  std::size_t history() const { return energy_history.dim(1); }
  std::size_t horizon() const { return weather_future.dim(1); }
};

/// Number of windows that fit in `length` steps. Zero when too short.
inline std::size_t window_count(std::size_t length, std::size_t history, std::size_t horizon, std::size_t stride) {
  if (stride == 0) throw ValidationError("stride must be >= 1");
  if (length < history + horizon) return 0;
  return (length - history - horizon) / stride + 1;
}

struct WindowSet {
  std::vector<ForecastSample<double>> samples;
  bool too_short = false;
};

/// Windows whose history starts at or after `begin` and whose horizon ends at
/// or before `end` (timeline indices). Issue times step by `stride`.
template <typename T = double>
std::vector<ForecastSample<T>> build_windows(const AlignedData& d, std::size_t history, std::size_t horizon,
                                             std::size_t stride, std::size_t begin, std::size_t end,
                                             bool* too_short = nullptr) {
  if (stride == 0) throw ValidationError("stride must be >= 1");
  if (history == 0 || horizon == 0) throw ValidationError("T_h and T_f must be >= 1");
  end = std::min(end, d.length());
  const std::size_t span = end > begin ? end - begin : 0;
  const std::size_t count = window_count(span, history, horizon, stride);
  if (too_short) *too_short = count == 0;
  const std::size_t sites = d.energy.dim(0), locs = d.weather.dim(0), nvar = d.weather.dim(2);
  std::vector<ForecastSample<T>> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t issue = begin + history + k * stride;
    ForecastSample<T> s;
    s.issue_time = d.timeline[issue];
    s.energy_history = Tensor<T>({sites, history, 1});
    s.target = Tensor<T>({sites, horizon, 1});
    for (std::size_t e = 0; e < sites; ++e) {
      for (std::size_t t = 0; t < history; ++t) s.energy_history.at(e, t, 0) = static_cast<T>(d.energy.at(e, issue - history + t));
      for (std::size_t t = 0; t < horizon; ++t) s.target.at(e, t, 0) = static_cast<T>(d.energy.at(e, issue + t));
    }
    s.weather_history = Tensor<T>({locs, history, nvar});
    s.weather_future = Tensor<T>({locs, horizon, nvar});
    for (std::size_t l = 0; l < locs; ++l)
      for (std::size_t v = 0; v < nvar; ++v) {
        for (std::size_t t = 0; t < history; ++t)
          s.weather_history.at(l, t, v) = static_cast<T>(d.weather.at(l, issue - history + t, v));
        for (std::size_t t = 0; t < horizon; ++t) s.weather_future.at(l, t, v) = static_cast<T>(d.weather.at(l, issue + t, v));
      }
    out.push_back(std::move(s));
  }
  return out;
}

/// Windows over the whole timeline.
inline WindowSet build_windows(const AlignedData& d, std::size_t history, std::size_t horizon, std::size_t stride) {
  WindowSet w;
  w.samples = build_windows<double>(d, history, horizon, stride, 0, d.length(), &w.too_short);
  return w;
}

// ---------------------------------------------------------------------------
// Dataset configuration and splits

enum class EnergyType { wind, solar };

struct DatasetConfig {
  std::vector<std::filesystem::path> energy_files;
  std::vector<std::filesystem::path> weather_files;
  SchemaConfig schema;
  std::size_t history = 336;
  std::size_t horizon = 24;
  std::size_t stride = 24;
  std::optional<Instant> train_start;
  Instant validation_start{};
  Instant test_start{};
  std::optional<Instant> test_end;  // exclusive
  EnergyType energy_type = EnergyType::wind;
  std::map<std::string, double> capacity;
  double default_capacity = 1.0;
  bool history_from_previous_split = false;

  static DatasetConfig parse(KeyValueConfig& kv) {
    DatasetConfig c;
    const auto base = kv.base_dir();
    for (const auto& f : kv.list("energy_files", true)) c.energy_files.push_back(base / f);
    for (const auto& f : kv.list("weather_files", true)) c.weather_files.push_back(base / f);
    c.schema.weather_variables = kv.list("weather_variables", false);
    c.history = kv.required<std::size_t>("T_h");
    c.horizon = kv.required<std::size_t>("T_f");
    c.stride = kv.optional<std::size_t>("stride", 24);
    auto instant_key = [&](const std::string& key, bool required) -> std::optional<Instant> {
      auto v = kv.raw(key);
      if (!v) {
        if (required) kv.error("missing required key `" + key + "`");
        return std::nullopt;
      }
      auto t = parse_instant(*v);
      if (!t) kv.error("key `" + key + "`: cannot parse timestamp `" + *v + "`");
      return t;
    };
    c.train_start = instant_key("train_start", false);
    c.validation_start = instant_key("validation_start", true).value_or(Instant{});
    c.test_start = instant_key("test_start", true).value_or(Instant{});
    c.test_end = instant_key("test_end", false);
    const auto type = kv.optional<std::string>("energy_type", "wind");
    if (type == "wind")
      c.energy_type = EnergyType::wind;
    else if (type == "solar")
      c.energy_type = EnergyType::solar;
    else
      kv.error("key `energy_type`: expected wind|solar, got `" + type + "`");
    const auto gaps = kv.optional<std::string>("gap_policy", "reject");
    if (gaps == "reject")
      c.schema.gap_policy = GapPolicy::reject;
    else if (gaps == "interpolate")
      c.schema.gap_policy = GapPolicy::interpolate;
    else
      kv.error("key `gap_policy`: expected reject|interpolate, got `" + gaps + "`");
    c.schema.max_gap_hours = kv.optional<std::size_t>("max_gap_hours", 3);
    c.default_capacity = kv.optional<double>("default_capacity", 1.0);
    c.history_from_previous_split = kv.optional<bool>("history_from_previous_split", false);
    for (const auto& [site, value] : kv.section("capacity")) {
      try {
        c.capacity[site] = std::stod(value);
      } catch (const std::exception&) {
        kv.error("capacity for `" + site + "`: cannot parse `" + value + "`");
      }
    }
    if (kv.has("T_h") && c.history == 0) kv.error("key `T_h` must be >= 1");
    if (kv.has("T_f") && c.horizon == 0) kv.error("key `T_f` must be >= 1");
    if (c.stride == 0) kv.error("key `stride` must be >= 1");
    if (kv.has("validation_start") && kv.has("test_start") && !(c.validation_start < c.test_start))
      kv.error("validation_start must precede test_start");
    kv.throw_if_errors("dataset config");
    return c;
  }

  static DatasetConfig from_file(const std::filesystem::path& path) {
    auto kv = KeyValueConfig::from_file(path);
    return parse(kv);
  }

  std::vector<double> capacities_for(const std::vector<std::string>& sites) const {
    std::vector<double> out;
    for (const auto& s : sites) {
      auto it = capacity.find(s);
      out.push_back(it == capacity.end() ? default_capacity : it->second);
    }
    return out;
  }
};

struct DatasetSplit {
  std::vector<ForecastSample<double>> train;
  std::vector<ForecastSample<double>> validation;
  std::vector<ForecastSample<double>> test;
  NormalizationStats normalization_stats;
  AlignedData data;  // normalized, with time features when solar
  std::array<std::size_t, 4> boundaries{};  // train begin, validation begin, test begin, test end
  std::vector<std::string> warnings;
};

inline std::size_t index_at_or_after(const std::vector<Instant>& timeline, Instant t) {
  return static_cast<std::size_t>(std::lower_bound(timeline.begin(), timeline.end(), t) - timeline.begin());
}

/// Chronological split. Normalization statistics come from the training
/// segment only. By default each split's windows (including history) stay
/// inside that split's segment.
inline DatasetSplit make_split(AlignedData d, const DatasetConfig& cfg) {
  DatasetSplit out;
  const std::size_t begin = cfg.train_start ? index_at_or_after(d.timeline, *cfg.train_start) : 0;
  const std::size_t val = index_at_or_after(d.timeline, cfg.validation_start);
  const std::size_t test = index_at_or_after(d.timeline, cfg.test_start);
  const std::size_t end = cfg.test_end ? index_at_or_after(d.timeline, *cfg.test_end) : d.length();
  if (!(begin < val && val <= test && test <= end)) throw ValidationError("split boundaries do not partition the timeline");
  out.boundaries = {begin, val, test, end};
  out.normalization_stats = compute_stats(d, begin, val, cfg.capacities_for(d.site_ids));
  out.warnings = out.normalization_stats.warnings;
  normalize(d, out.normalization_stats);
  if (cfg.energy_type == EnergyType::solar) append_time_features(d);

  auto segment = [&](std::size_t seg_begin, std::size_t seg_end, const char* name) {
    bool short_flag = false;
    std::vector<ForecastSample<double>> s;
    if (cfg.history_from_previous_split && seg_begin >= cfg.history) {
      // Targets inside the segment; history may reach back into the previous one.
      s = build_windows<double>(d, cfg.history, cfg.horizon, cfg.stride, seg_begin - cfg.history, seg_end, &short_flag);
    } else {
      s = build_windows<double>(d, cfg.history, cfg.horizon, cfg.stride, seg_begin, seg_end, &short_flag);
    }
    if (short_flag) out.warnings.push_back(std::string(name) + " segment too short for a single window");
    return s;
  };
  out.train = segment(begin, val, "train");
  out.validation = segment(val, test, "validation");
  out.test = segment(test, end, "test");
  out.data = std::move(d);
  return out;
}

inline DatasetSplit load_dataset(const DatasetConfig& cfg, IngestReport* report = nullptr) {
  auto ingested = ingest(cfg.energy_files, cfg.weather_files, cfg.schema);
  if (report) *report = ingested.report;
  return make_split(align(ingested.energy, ingested.weather), cfg);
}

}  // namespace mkst::data
