#pragma once

// Attention family used by the forecaster: scaled dot-product, multi-head,
// multi-sized-kernel convolutional attention, spatio-temporal attention and
// their composition (MKST), plus the learned spatial-relation matrix.
//
// Spatio-temporal tensors are laid out [sites x time x features].

#include <cmath>
#include <string>
#include <vector>

#include "mkst/ops.hpp"
#include "mkst/params.hpp"

namespace mkst::attention {

inline constexpr double kRowSumTolerance = 1e-6;

/// Per-site batch matrix product, B (x) D.
template <typename T>
Var<T> batch_matmul(const Var<T>& b, const Var<T>& d) {
  return mkst::bmm(b, d);
}

/// softmax(Q K^T / sqrt(D_K)) per leading batch index. Q: [N x T_Q x D_K],
/// K: [N x T_K x D_K] -> [N x T_Q x T_K].
template <typename T>
Var<T> attention_weights(const Var<T>& q, const Var<T>& k) {
  if (q.shape().size() != 3 || k.shape().size() != 3 || q.dim(2) != k.dim(2) || q.dim(0) != k.dim(0))
    throw ShapeError("attention_weights: queries " + shape_str(q.shape()) + " keys " + shape_str(k.shape()));
  const T inv = T{1} / std::sqrt(static_cast<T>(q.dim(2)));
  return softmax_rows(scale(mkst::bmm(q, k, /*transpose_b=*/true), inv));
}

namespace detail {
template <typename T>
Var<T> as_batch(const Var<T>& x) {
  if (x.shape().size() == 3) return x;
  if (x.shape().size() == 2) return reshape(x, {1, x.dim(0), x.dim(1)});
  throw ShapeError("expected rank 2 or 3, got " + shape_str(x.shape()));
}

template <typename T>
Var<T> like_input(const Var<T>& out, const Var<T>& q) {
  if (q.shape().size() == 2) return reshape(out, {out.dim(1), out.dim(2)});
  return out;
}
}  // namespace detail

/// Scaled dot-product attention. Accepts flat [N x D] operands or per-site
/// batches [L x N x D].
template <typename T>
Var<T> sdpa(const Var<T>& q, const Var<T>& k, const Var<T>& v) {
  auto q3 = detail::as_batch(q), k3 = detail::as_batch(k), v3 = detail::as_batch(v);
  if (k3.dim(1) != v3.dim(1) || k3.dim(0) != v3.dim(0))
    throw ShapeError("sdpa: keys " + shape_str(k.shape()) + " values " + shape_str(v.shape()));
  return detail::like_input(mkst::bmm(attention_weights(q3, k3), v3), q);
}

template <typename T>
struct MultiHeadParams {
  std::vector<Var<T>> query_proj;  // per head [D_r x D_K]
  std::vector<Var<T>> key_proj;    // per head [D_r x D_K]
  std::vector<Var<T>> value_proj;  // per head [D_r x D_V]
  Var<T> output_proj;              // [heads*D_V x D_r]

  std::size_t heads() const { return query_proj.size(); }

  template <typename Rng>
  static MultiHeadParams random(std::size_t model_dim, std::size_t heads, Rng& rng) {
    if (heads == 0 || model_dim % heads != 0)
      throw ValidationError("multi-head: D_r=" + std::to_string(model_dim) + " not divisible by " +
                            std::to_string(heads) + " heads");
    const std::size_t d = model_dim / heads;
    MultiHeadParams p;
    for (std::size_t i = 0; i < heads; ++i) {
      p.query_proj.push_back(fan_in_param<T>({model_dim, d}, model_dim, rng));
      p.key_proj.push_back(fan_in_param<T>({model_dim, d}, model_dim, rng));
      p.value_proj.push_back(fan_in_param<T>({model_dim, d}, model_dim, rng));
    }
    p.output_proj = fan_in_param<T>({model_dim, model_dim}, model_dim, rng);
    return p;
  }
};

/// Classic multi-head attention over flat [N x D_r] operands.
template <typename T>
Var<T> multi_head(const Var<T>& q, const Var<T>& k, const Var<T>& v, const MultiHeadParams<T>& p) {
  const std::size_t model_dim = q.shape().back();
  if (p.heads() == 0 || model_dim % p.heads() != 0)
    throw ValidationError("multi-head: D_r=" + std::to_string(model_dim) + " not divisible by " +
                          std::to_string(p.heads()) + " heads");
  Var<T> joined;
  for (std::size_t i = 0; i < p.heads(); ++i) {
    auto head = sdpa(matmul(q, p.query_proj[i]), matmul(k, p.key_proj[i]), matmul(v, p.value_proj[i]));
    joined = i == 0 ? head : concat(joined, head, head.shape().size() - 1);
  }
  return matmul(joined, p.output_proj);
}

/// One temporal convolution producing queries or keys.
template <typename T>
struct ConvProjection {
  Var<T> weight;  // [c x D_in x D_out]
  Var<T> bias;    // [D_out]

  std::size_t width() const { return weight.dim(0); }

  template <typename Rng>
  static ConvProjection random(std::size_t width, std::size_t in_dim, std::size_t out_dim, Rng& rng) {
    return {fan_in_param<T>({width, in_dim, out_dim}, width * in_dim, rng), zero_param<T>({out_dim})};
  }
};

/// Per-site 1-D convolution along time, zero "same" padding.
template <typename T>
Var<T> conv_project(const Var<T>& x, const ConvProjection<T>& proj) {
  return conv1d_same(x, proj.weight, proj.bias);
}

template <typename T>
struct KernelHead {
  std::size_t kernel_size = 0;
  ConvProjection<T> query;
  ConvProjection<T> key;
  Var<T> value_proj;  // [D_r x D_V]
};

/// Parameters of a multi-sized-kernel attention block; heads are kept in
/// ascending kernel-size order.
template <typename T>
struct MKParams {
  std::vector<KernelHead<T>> heads;
  Var<T> output_proj;  // [heads*D_V x D_r], shared across value sites

  std::size_t key_dim() const { return heads.front().query.weight.dim(2); }
  std::size_t value_dim() const { return heads.front().value_proj.dim(1); }
  std::size_t model_dim() const { return output_proj.dim(1); }

  /// Output projection starts at zero when `zero_output` is set, which turns
  /// an enclosing residual connection into the identity.
  template <typename Rng>
  static MKParams random(std::vector<std::size_t> kernel_sizes, std::size_t model_dim, std::size_t key_dim,
                         std::size_t value_dim, bool zero_output, Rng& rng) {
    validate(kernel_sizes, model_dim, value_dim);
    std::sort(kernel_sizes.begin(), kernel_sizes.end());
    MKParams p;
    for (std::size_t c : kernel_sizes) {
      KernelHead<T> h;
      h.kernel_size = c;
      h.query = ConvProjection<T>::random(c, model_dim, key_dim, rng);
      h.key = ConvProjection<T>::random(c, model_dim, key_dim, rng);
      h.value_proj = fan_in_param<T>({model_dim, value_dim}, model_dim, rng);
      p.heads.push_back(std::move(h));
    }
    const std::size_t cat = kernel_sizes.size() * value_dim;
    p.output_proj = zero_output ? zero_param<T>({cat, model_dim}) : fan_in_param<T>({cat, model_dim}, cat, rng);
    return p;
  }

  static void validate(const std::vector<std::size_t>& kernel_sizes, std::size_t model_dim, std::size_t value_dim) {
    if (kernel_sizes.empty()) throw ValidationError("kernel_sizes must not be empty");
    for (std::size_t c : kernel_sizes)
      if (c == 0 || c % 2 == 0) throw ValidationError("kernel size " + std::to_string(c) + " must be odd and positive");
    if (kernel_sizes.size() * value_dim != model_dim)
      throw ValidationError("number of kernels (" + std::to_string(kernel_sizes.size()) + ") * D_V (" +
                            std::to_string(value_dim) + ") must equal D_r (" + std::to_string(model_dim) + ")");
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    for (std::size_t i = 0; i < heads.size(); ++i) {
      const std::string h = prefix + ".head" + std::to_string(i);
      out.push_back({h + ".query.weight", heads[i].query.weight});
      out.push_back({h + ".query.bias", heads[i].query.bias});
      out.push_back({h + ".key.weight", heads[i].key.weight});
      out.push_back({h + ".key.bias", heads[i].key.bias});
      out.push_back({h + ".value_proj", heads[i].value_proj});
    }
    out.push_back({prefix + ".output_proj", output_proj});
  }
};

/// Multi-sized-kernel attention on flat [N x D_r] sequences.
template <typename T>
Var<T> mk_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const MKParams<T>& p) {
  auto q3 = detail::as_batch(q), k3 = detail::as_batch(k), v3 = detail::as_batch(v);
  Var<T> joined;
  for (std::size_t i = 0; i < p.heads.size(); ++i) {
    const auto& h = p.heads[i];
    auto head = sdpa(conv_project(q3, h.query), conv_project(k3, h.key), matmul(v3, h.value_proj));
    joined = i == 0 ? head : concat(joined, head, 2);
  }
  return detail::like_input(matmul(joined, p.output_proj), q);
}

/// Throws unless every entry is non-negative and each row sums to 1.
template <typename T>
void require_row_stochastic(const Tensor<T>& y, const char* what) {
  if (y.rank() != 2) throw ShapeError(std::string(what) + ": spatial matrix must be rank 2, got " + shape_str(y.shape()));
  for (std::size_t j = 0; j < y.dim(0); ++j) {
    T s{0};
    for (std::size_t i = 0; i < y.dim(1); ++i) {
      if (y.at(j, i) < T{0}) throw ValidationError(std::string(what) + ": negative spatial weight in row " + std::to_string(j));
      s += y.at(j, i);
    }
    if (std::abs(s - T{1}) > static_cast<T>(kRowSumTolerance))
      throw ValidationError(std::string(what) + ": spatial weights row " + std::to_string(j) + " sums to " +
                            std::to_string(static_cast<double>(s)));
  }
}

/// Mixed temporal attention matrices B<j> = sum_i y<j,i> M<i>.
template <typename T>
Var<T> st_mixed_weights(const Var<T>& q, const Var<T>& k, const Var<T>& y) {
  require_row_stochastic(y.value(), "st_attention");
  if (y.dim(1) != q.dim(0))
    throw ShapeError("st_attention: spatial matrix " + shape_str(y.shape()) + " vs " + std::to_string(q.dim(0)) +
                     " key sites");
  return mix_sites(y, attention_weights(q, k));
}

/// Spatio-temporal attention. Q: [L_K x T_Q x D_K], K: [L_K x T_K x D_K],
/// V: [L_V x T_K x D_V], Y: [L_V x L_K] -> [L_V x T_Q x D_V].
template <typename T>
Var<T> st_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const Var<T>& y) {
  if (v.shape().size() != 3 || v.dim(0) != y.dim(0) || v.dim(1) != k.dim(1))
    throw ShapeError("st_attention: values " + shape_str(v.shape()) + " keys " + shape_str(k.shape()) +
                     " spatial " + shape_str(y.shape()));
  return mkst::bmm(st_mixed_weights(q, k, y), v);
}

/// MKST attention: per kernel size, convolutional queries/keys feed an
/// ST-attention over projected values; heads are concatenated and projected
/// by the shared output matrix at every value site.
template <typename T>
Var<T> mkst_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const Var<T>& y, const MKParams<T>& p) {
  Var<T> joined;
  for (std::size_t i = 0; i < p.heads.size(); ++i) {
    const auto& h = p.heads[i];
    auto head = st_attention(conv_project(q, h.query), conv_project(k, h.key), matmul(v, h.value_proj), y);
    joined = i == 0 ? head : concat(joined, head, 2);
  }
  return matmul(joined, p.output_proj);
}

template <typename T>
struct SpatialEncodingParams {
  Var<T> energy;   // C^E [D_r x D_lambda]
  Var<T> weather;  // C^W [D_r x D_lambda]

  template <typename Rng>
  static SpatialEncodingParams random(std::size_t model_dim, std::size_t lambda_dim, Rng& rng) {
    if (lambda_dim == 0) throw ValidationError("D_lambda must be positive");
    return {fan_in_param<T>({model_dim, lambda_dim}, model_dim, rng),
            fan_in_param<T>({model_dim, lambda_dim}, model_dim, rng)};
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".energy", energy});
    out.push_back({prefix + ".weather", weather});
  }
};

/// Y = softmax((S_E C_E)(S_W C_W)^T / sqrt(D_lambda)) -> [L_E x L_W].
template <typename T>
Var<T> spatial_weights(const Var<T>& energy_enc, const Var<T>& weather_enc, const SpatialEncodingParams<T>& p) {
  auto le = matmul(energy_enc, p.energy);
  auto lw = matmul(weather_enc, p.weather);
  auto logits = matmul(le, transpose_last2(lw));
  const T inv = T{1} / std::sqrt(static_cast<T>(p.energy.dim(1)));
  return softmax_rows(scale(logits, inv));
}

}  // namespace mkst::attention
