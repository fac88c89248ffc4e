#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "mkst/data.hpp"
#include "mkst/errors.hpp"
#include "mkst/tensor.hpp"

namespace mkst::eval {

struct SiteMetrics {
  std::vector<std::string> sites;
  std::vector<double> mae;   // normalized units, per site
  std::vector<double> rmse;
  std::vector<double> mae_mw;  // empty unless capacities were given
  std::vector<double> rmse_mw;
  double mean_mae = 0;
  double mean_rmse = 0;
  double mean_mae_mw = 0;
  double mean_rmse_mw = 0;

  bool has_mw() const { return !mae_mw.empty(); }
};

namespace detail {
inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0;
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline void finish(SiteMetrics& m) {
  m.mean_mae = mean_of(m.mae);
  m.mean_rmse = mean_of(m.rmse);
  m.mean_mae_mw = mean_of(m.mae_mw);
  m.mean_rmse_mw = mean_of(m.rmse_mw);
}
}  // namespace detail

/// Per-site MAE / RMSE over every sample and horizon step. Predictions and
/// targets are [L_E x T_f x 1] per sample in normalized units.
template <typename T>
SiteMetrics compute_metrics(const std::vector<Tensor<T>>& predictions, const std::vector<Tensor<T>>& targets,
                            const std::vector<std::string>& sites, const std::vector<double>& capacities = {}) {
  if (predictions.empty()) throw ValidationError("compute_metrics: empty test set");
  if (predictions.size() != targets.size())
    throw ShapeError("compute_metrics: " + std::to_string(predictions.size()) + " predictions vs " +
                     std::to_string(targets.size()) + " targets");
  const std::size_t n_sites = predictions.front().dim(0);
  if (sites.size() != n_sites) throw ShapeError("compute_metrics: site id count does not match predictions");
  if (!capacities.empty() && capacities.size() != n_sites)
    throw ShapeError("compute_metrics: capacity count does not match sites");
  std::vector<double> abs_sum(n_sites, 0.0), sq_sum(n_sites, 0.0);
  std::vector<std::size_t> count(n_sites, 0);
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto& p = predictions[i];
    const auto& t = targets[i];
    if (p.shape() != t.shape() || p.dim(0) != n_sites)
      throw ShapeError("compute_metrics: sample " + std::to_string(i) + " prediction " + shape_str(p.shape()) +
                       " vs target " + shape_str(t.shape()));
    if (!t.all_finite()) throw ValidationError("compute_metrics: non-finite target in sample " + std::to_string(i));
    const std::size_t per_site = p.size() / n_sites;
    for (std::size_t s = 0; s < n_sites; ++s)
      for (std::size_t k = 0; k < per_site; ++k) {
        const double e = static_cast<double>(p[s * per_site + k]) - static_cast<double>(t[s * per_site + k]);
        abs_sum[s] += std::abs(e);
        sq_sum[s] += e * e;
        ++count[s];
      }
  }
  SiteMetrics m;
  m.sites = sites;
  for (std::size_t s = 0; s < n_sites; ++s) {
    m.mae.push_back(abs_sum[s] / static_cast<double>(count[s]));
    m.rmse.push_back(std::sqrt(sq_sum[s] / static_cast<double>(count[s])));
    if (!capacities.empty()) {
      m.mae_mw.push_back(m.mae.back() * capacities[s]);
      m.rmse_mw.push_back(m.rmse.back() * capacities[s]);
    }
  }
  detail::finish(m);
  return m;
}

/// Cell-wise mean over repeated runs.
inline SiteMetrics run_mean(const std::vector<SiteMetrics>& runs) {
  if (runs.empty()) throw ValidationError("run_mean: need at least one run");
  SiteMetrics out;
  out.sites = runs.front().sites;
  const std::size_t n = out.sites.size();
  const bool mw = runs.front().has_mw();
  out.mae.assign(n, 0.0);
  out.rmse.assign(n, 0.0);
  if (mw) {
    out.mae_mw.assign(n, 0.0);
    out.rmse_mw.assign(n, 0.0);
  }
  for (const auto& r : runs) {
    if (r.sites != out.sites || r.has_mw() != mw) throw ValidationError("run_mean: runs disagree on sites or units");
    for (std::size_t s = 0; s < n; ++s) {
      out.mae[s] += r.mae[s];
      out.rmse[s] += r.rmse[s];
      if (mw) {
        out.mae_mw[s] += r.mae_mw[s];
        out.rmse_mw[s] += r.rmse_mw[s];
      }
    }
  }
  const double k = static_cast<double>(runs.size());
  for (std::size_t s = 0; s < n; ++s) {
    out.mae[s] /= k;
    out.rmse[s] /= k;
    if (mw) {
      out.mae_mw[s] /= k;
      out.rmse_mw[s] /= k;
    }
  }
  detail::finish(out);
  return out;
}

inline std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

/// `site,mae,rmse[,mae_mw,rmse_mw]`, one row per site in declaration order,
/// then an `ALL` row with the site averages.
inline void write_metrics_csv(const std::filesystem::path& path, const SiteMetrics& m) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "site,mae,rmse" << (m.has_mw() ? ",mae_mw,rmse_mw" : "") << "\n";
  for (std::size_t s = 0; s < m.sites.size(); ++s) {
    out << m.sites[s] << ',' << format_number(m.mae[s]) << ',' << format_number(m.rmse[s]);
    if (m.has_mw()) out << ',' << format_number(m.mae_mw[s]) << ',' << format_number(m.rmse_mw[s]);
    out << "\n";
  }
  out << "ALL," << format_number(m.mean_mae) << ',' << format_number(m.mean_rmse);
  if (m.has_mw()) out << ',' << format_number(m.mean_mae_mw) << ',' << format_number(m.mean_rmse_mw);
  out << "\n";
  if (!out) throw IoError("failed writing " + path.string());
}

struct TimeSpan {
  data::Instant begin;  // inclusive
  data::Instant end;    // exclusive
};

/// `FROM/TO` with ISO timestamps or bare dates; a bare TO date is inclusive
/// of that whole day.
inline TimeSpan parse_span(const std::string& text) {
  const auto slash = text.find('/');
  if (slash == std::string::npos) throw ValidationError("span must look like FROM/TO, got `" + text + "`");
  auto parse_end = [](std::string s, bool is_end) {
    s = trim(s);
    if (s.size() == 10) {
      auto t = data::require_instant(s + "T00:00:00Z", "span");
      return is_end ? t + std::chrono::hours{24} : t;
    }
    return data::require_instant(s, "span");
  };
  TimeSpan span{parse_end(text.substr(0, slash), false), parse_end(text.substr(slash + 1), true)};
  if (!(span.begin < span.end)) throw ValidationError("empty span `" + text + "`");
  return span;
}

/// `timestamp,site,target,prediction` rows for every sample step inside the
/// span, ordered by sample then site then step.
template <typename T>
void write_trace_csv(const std::filesystem::path& path, const std::vector<data::ForecastSample<T>>& samples,
                     const std::vector<Tensor<T>>& predictions, const std::vector<std::string>& sites,
                     const std::optional<TimeSpan>& span = std::nullopt) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "timestamp,site,target,prediction\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const auto& p = predictions.at(i);
    for (std::size_t site = 0; site < sites.size(); ++site)
      for (std::size_t k = 0; k < s.target.dim(1); ++k) {
        const auto t = s.issue_time + std::chrono::hours{static_cast<long>(k)};
        if (span && (t < span->begin || !(t < span->end))) continue;
        out << data::format_instant(t) << ',' << sites[site] << ','
            << format_number(static_cast<double>(s.target.at(site, k, 0))) << ','
            << format_number(static_cast<double>(p.at(site, k, 0))) << "\n";
      }
  }
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace mkst::eval
