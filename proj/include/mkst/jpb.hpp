#pragma once

#include <string>
#include <utility>

#include "mkst/attention.hpp"
#include "mkst/utcae.hpp"

namespace mkst {

/// Joint processing block: UTCAE refinement of both modalities, then an
/// MKST transfer from weather to energy with a residual on the energy path.
template <typename T>
struct JpbParams {
  UtcaeParams<T> energy_utcae;
  UtcaeParams<T> weather_utcae;
  attention::MKParams<T> attention;

  template <typename Rng>
  static JpbParams random(std::size_t levels, std::size_t model_dim, const std::vector<std::size_t>& kernels,
                          std::size_t key_dim, std::size_t value_dim, Rng& rng) {
    JpbParams p;
    p.energy_utcae = UtcaeParams<T>::random(levels, model_dim, rng);
    p.weather_utcae = UtcaeParams<T>::random(levels, model_dim, rng);
    p.attention = attention::MKParams<T>::random(kernels, model_dim, key_dim, value_dim, /*zero_output=*/true, rng);
    return p;
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    energy_utcae.collect(prefix + ".utcae_energy", out);
    weather_utcae.collect(prefix + ".utcae_weather", out);
    attention.collect(prefix + ".mkst", out);
  }
};

template <typename T>
struct JpbOutput {
  Var<T> energy;
  Var<T> weather;
};

template <typename T, typename Rng>
JpbOutput<T> jpb_forward(const Var<T>& energy_in, const Var<T>& weather_in, const Var<T>& spatial,
                         const JpbParams<T>& p, T dropout_rate, Rng* rng) {
  if (spatial.shape().size() != 2 || spatial.dim(0) != energy_in.dim(0) || spatial.dim(1) != weather_in.dim(0))
    throw ShapeError("jpb: spatial matrix " + shape_str(spatial.shape()) + " vs energy " +
                     shape_str(energy_in.shape()) + " and weather " + shape_str(weather_in.shape()));
  if (energy_in.dim(1) != weather_in.dim(1))
    throw ShapeError("jpb: energy and weather time axes differ: " + shape_str(energy_in.shape()) + " vs " +
                     shape_str(weather_in.shape()));
  auto energy_u = utcae_forward(energy_in, p.energy_utcae, dropout_rate, rng);
  auto weather_out = utcae_forward(weather_in, p.weather_utcae, dropout_rate, rng);
  auto transfer = attention::mkst_attention(weather_out, weather_out, energy_u, spatial, p.attention);
  return {transfer + energy_u, weather_out};
}

template <typename T>
JpbOutput<T> jpb_forward(const Var<T>& energy_in, const Var<T>& weather_in, const Var<T>& spatial,
                         const JpbParams<T>& p) {
  return jpb_forward<T, std::mt19937_64>(energy_in, weather_in, spatial, p, T{0}, nullptr);
}

}  // namespace mkst
