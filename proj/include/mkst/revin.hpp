#pragma once

// Reversible instance normalization of the energy history: each sample is
// z-scored per site with its own statistics, passed through a learnable
// per-site affine map, and the model output is mapped back the same way.

#include <algorithm>
#include <cmath>
#include <utility>

#include "mkst/ops.hpp"

namespace mkst {

inline constexpr double kRevinMinStd = 1e-5;
inline constexpr double kRevinAffineEps = 1e-10;

template <typename T>
struct RevinState {
  Tensor<T> mean;    // [L]
  Tensor<T> stddev;  // [L]
};

/// Per-site mean and (population) stddev along time, stddev clamped.
template <typename T>
RevinState<T> revin_statistics(const Tensor<T>& history) {
  const std::size_t sites = history.dim(0);
  const std::size_t per_site = history.size() / sites;
  if (per_site == 0) throw ShapeError("revin: empty history");
  RevinState<T> st{Tensor<T>({sites}), Tensor<T>({sites})};
  for (std::size_t l = 0; l < sites; ++l) {
    T m{0};
    for (std::size_t i = 0; i < per_site; ++i) m += history[l * per_site + i];
    m /= static_cast<T>(per_site);
    T v{0};
    for (std::size_t i = 0; i < per_site; ++i) v += (history[l * per_site + i] - m) * (history[l * per_site + i] - m);
    st.mean[l] = m;
    st.stddev[l] = std::max(std::sqrt(v / static_cast<T>(per_site)), static_cast<T>(kRevinMinStd));
  }
  return st;
}

template <typename T>
std::pair<Var<T>, RevinState<T>> revin_apply(const Var<T>& history, const Var<T>& gain, const Var<T>& shift) {
  auto st = revin_statistics(history.value());
  const std::size_t sites = st.mean.size();
  Tensor<T> inv_std({sites}), neg_mean({sites});
  for (std::size_t l = 0; l < sites; ++l) {
    inv_std[l] = T{1} / st.stddev[l];
    neg_mean[l] = -st.mean[l] / st.stddev[l];
  }
  auto z = site_affine(history, Var<T>(inv_std), Var<T>(neg_mean));
  return {site_affine(z, gain, shift), std::move(st)};
}

template <typename T>
Var<T> revin_invert(const Var<T>& normalized, const RevinState<T>& st, const Var<T>& gain, const Var<T>& shift) {
  auto z = site_affine_inverse(normalized, gain, shift, static_cast<T>(kRevinAffineEps));
  return site_affine(z, Var<T>(st.stddev), Var<T>(st.mean));
}

}  // namespace mkst
