#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "mkst/mkst.hpp"

namespace mkst::fixtures {

inline ModelConfig tiny_config(std::size_t le = 2, std::size_t lw = 3, std::size_t th = 8, std::size_t tf = 4,
                               std::size_t dw = 2) {
  ModelConfig c;
  c.energy_sites = le;
  c.weather_sites = lw;
  c.history = th;
  c.horizon = tf;
  c.weather_vars = dw;
  c.model_dim = 8;
  c.key_dim = 4;
  c.value_dim = 4;
  c.kernel_sizes = {3, 5};
  c.levels = 2;
  c.blocks = 1;
  c.lambda_dim = 4;
  c.dropout = 0.1;
  return c;
}

template <typename T = double>
Tensor<T> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<T> t(shape);
  for (auto& v : t.storage()) v = static_cast<T>(d(rng));
  return t;
}

template <typename T = double>
data::ForecastSample<T> random_sample(const ModelConfig& c, std::mt19937_64& rng) {
  data::ForecastSample<T> s;
  s.energy_history = random_tensor<T>({c.energy_sites, c.history, 1}, rng, 0.0, 1.0);
  s.weather_history = random_tensor<T>({c.weather_sites, c.history, c.weather_vars}, rng);
  s.weather_future = random_tensor<T>({c.weather_sites, c.horizon, c.weather_vars}, rng);
  s.target = random_tensor<T>({c.energy_sites, c.horizon, 1}, rng, 0.0, 1.0);
  return s;
}

/// Overwrites every parameter (including zero-initialized ones) with U(lo, hi)
/// so that no path is trivially silent.
template <typename T>
void randomize(ParamList<T>& params, std::mt19937_64& rng, double lo = -0.5, double hi = 0.5) {
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& p : params)
    for (auto& v : p.var.mutable_value().storage()) v = static_cast<T>(d(rng));
}

template <typename T>
Var<T> random_var(const Shape& shape, std::mt19937_64& rng, bool requires_grad = false) {
  return Var<T>(random_tensor<T>(shape, rng), requires_grad);
}

/// Random row-stochastic matrix.
inline Tensor<double> random_stochastic(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  auto t = random_tensor<double>({rows, cols}, rng, 0.05, 1.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < cols; ++c) s += t.at(r, c);
    for (std::size_t c = 0; c < cols; ++c) t.at(r, c) /= s;
  }
  return t;
}

inline std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("mkst_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

struct SyntheticSpec {
  std::size_t energy_sites = 2;
  std::size_t weather_sites = 3;
  std::size_t variables = 2;
  std::size_t hours = 24 * 20;
  std::string start = "2020-01-01T00:00:00Z";
  std::uint64_t seed = 1;
  std::vector<std::size_t> sources;  // generating weather site per energy site; default s % weather_sites
  std::size_t lag = 2;

  std::size_t source_of(std::size_t s) const { return sources.empty() ? s % weather_sites : sources.at(s); }
};

/// Smooth weather (random sinusoid mixtures) and energy = logistic of a
/// lagged weather signal at site `spec.source_of(s)`. Writes one energy CSV
/// and one weather CSV in `dir`.
inline void write_synthetic_csv(const std::filesystem::path& dir, const SyntheticSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> phase(0.0, 6.283185307179586), period(8.0, 60.0);
  const auto t0 = data::require_instant(spec.start, "synthetic start");
  std::vector<std::vector<std::vector<double>>> w(spec.weather_sites,
                                                  std::vector<std::vector<double>>(spec.hours, std::vector<double>(spec.variables)));
  for (std::size_t l = 0; l < spec.weather_sites; ++l)
    for (std::size_t v = 0; v < spec.variables; ++v) {
      const double p1 = phase(rng), p2 = phase(rng), q1 = period(rng), q2 = period(rng);
      for (std::size_t t = 0; t < spec.hours; ++t)
        w[l][t][v] = 3.0 * std::sin(6.283185307179586 * t / q1 + p1) + 1.5 * std::sin(6.283185307179586 * t / q2 + p2) + 5.0;
    }
  std::ofstream we(dir / "weather.csv");
  we << "timestamp,location_id";
  for (std::size_t v = 0; v < spec.variables; ++v) we << ",var" << v;
  we << "\n";
  for (std::size_t l = 0; l < spec.weather_sites; ++l)
    for (std::size_t t = 0; t < spec.hours; ++t) {
      we << data::format_instant(t0 + std::chrono::hours{static_cast<long>(t)}) << ",loc" << l;
      for (std::size_t v = 0; v < spec.variables; ++v) we << ',' << w[l][t][v];
      we << "\n";
    }
  std::ofstream en(dir / "energy.csv");
  en << "timestamp,site_id,value\n";
  for (std::size_t s = 0; s < spec.energy_sites; ++s)
    for (std::size_t t = 0; t < spec.hours; ++t) {
      const std::size_t lagged = t >= spec.lag ? t - spec.lag : 0;
      const double x = w[spec.source_of(s)][lagged][0] - 5.0;
      en << data::format_instant(t0 + std::chrono::hours{static_cast<long>(t)}) << ",site" << s << ','
         << 1.0 / (1.0 + std::exp(-x)) << "\n";
    }
}

/// Dataset config for the synthetic CSVs with a 50/25/25 day split.
inline std::filesystem::path write_synthetic_dataset(const std::filesystem::path& dir, const SyntheticSpec& spec,
                                                     std::size_t history = 24, std::size_t horizon = 12,
                                                     const std::string& extra = "") {
  write_synthetic_csv(dir, spec);
  const auto t0 = data::require_instant(spec.start, "synthetic start");
  const std::size_t days = spec.hours / 24;
  auto day = [&](std::size_t d) { return data::format_instant(t0 + std::chrono::hours{static_cast<long>(24 * d)}); };
  const auto path = dir / "dataset.ini";
  std::ofstream out(path);
  out << "format = 1\n"
      << "energy_files = energy.csv\n"
      << "weather_files = weather.csv\n"
      << "T_h = " << history << "\n"
      << "T_f = " << horizon << "\n"
      << "stride = 12\n"
      << "validation_start = " << day(days / 2) << "\n"
      << "test_start = " << day(3 * days / 4) << "\n"
      << extra;
  return path;
}

}  // namespace mkst::fixtures
