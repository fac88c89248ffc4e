#pragma once

// U-shaped temporal convolutional auto-encoder. Each site is processed
// independently along time through a P-level max-pool / upsample pyramid
// with concatenative skip connections. Channel count stays at D_r.

#include <string>
#include <vector>

#include "mkst/attention.hpp"
#include "mkst/ops.hpp"
#include "mkst/params.hpp"

namespace mkst {

inline constexpr std::size_t kUtcaeKernelWidth = 3;

template <typename T>
struct UtcaeParams {
  std::vector<attention::ConvProjection<T>> encoder;  // P-1 stages, D_r -> D_r
  attention::ConvProjection<T> bottom;                // D_r -> D_r
  std::vector<attention::ConvProjection<T>> decoder;  // P-1 stages, 2 D_r -> D_r; index = level

  std::size_t levels() const { return encoder.size() + 1; }
  std::size_t channels() const { return bottom.weight.dim(2); }

  template <typename Rng>
  static UtcaeParams random(std::size_t levels, std::size_t channels, Rng& rng) {
    if (levels == 0) throw ValidationError("UTCAE pyramid level count P must be >= 1");
    UtcaeParams p;
    for (std::size_t l = 0; l + 1 < levels; ++l)
      p.encoder.push_back(attention::ConvProjection<T>::random(kUtcaeKernelWidth, channels, channels, rng));
    p.bottom = attention::ConvProjection<T>::random(kUtcaeKernelWidth, channels, channels, rng);
    for (std::size_t l = 0; l + 1 < levels; ++l)
      p.decoder.push_back(attention::ConvProjection<T>::random(kUtcaeKernelWidth, 2 * channels, channels, rng));
    return p;
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    for (std::size_t l = 0; l < encoder.size(); ++l) {
      out.push_back({prefix + ".enc" + std::to_string(l) + ".weight", encoder[l].weight});
      out.push_back({prefix + ".enc" + std::to_string(l) + ".bias", encoder[l].bias});
    }
    out.push_back({prefix + ".bottom.weight", bottom.weight});
    out.push_back({prefix + ".bottom.bias", bottom.bias});
    for (std::size_t l = 0; l < decoder.size(); ++l) {
      out.push_back({prefix + ".dec" + std::to_string(l) + ".weight", decoder[l].weight});
      out.push_back({prefix + ".dec" + std::to_string(l) + ".bias", decoder[l].bias});
    }
  }
};

/// Dropout after each encoder stage; pass rate 0 (or a null rng) for eval.
template <typename T, typename Rng>
Var<T> utcae_forward(const Var<T>& x, const UtcaeParams<T>& p, T dropout_rate, Rng* rng) {
  if (x.shape().size() != 3 || x.dim(1) == 0)
    throw ShapeError("utcae: expected [sites x time x D_r] with time > 0, got " + shape_str(x.shape()));
  if (x.dim(2) != p.channels())
    throw ShapeError("utcae: input width " + std::to_string(x.dim(2)) + " vs D_r " + std::to_string(p.channels()));
  std::vector<Var<T>> skips;
  Var<T> h = x;
  for (const auto& stage : p.encoder) {
    h = relu(attention::conv_project(h, stage));
    skips.push_back(h);
    h = maxpool2_time(h);
    if (rng && dropout_rate > T{0}) h = dropout(h, dropout_rate, *rng);
  }
  h = relu(attention::conv_project(h, p.bottom));
  for (std::size_t level = p.decoder.size(); level-- > 0;) {
    const auto& skip = skips[level];
    h = upsample2_time(h, skip.dim(1));
    h = relu(attention::conv_project(concat(h, skip, 2), p.decoder[level]));
  }
  return h;
}

template <typename T>
Var<T> utcae_forward(const Var<T>& x, const UtcaeParams<T>& p) {
  return utcae_forward<T, std::mt19937_64>(x, p, T{0}, nullptr);
}

}  // namespace mkst
