#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "mkst/autograd.hpp"

namespace mkst {

namespace kernels {

// C[m x n] += op(A) * op(B) where op(A) is m x k and op(B) is k x n.
template <typename T>
void gemm_acc(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b,
              T* c) {
  if (!trans_a && !trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      T* crow = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = a[i * k + p];
        if (av == T{0}) continue;
        const T* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (trans_a && !trans_b) {
    // a stored k x m
    for (std::size_t p = 0; p < k; ++p) {
      const T* arow = a + p * m;
      const T* brow = b + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const T av = arow[i];
        if (av == T{0}) continue;
        T* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!trans_a && trans_b) {
    // b stored n x k
    for (std::size_t i = 0; i < m; ++i) {
      const T* arow = a + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const T* brow = b + j * k;
        T s{0};
        for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
        c[i * n + j] += s;
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        T s{0};
        for (std::size_t p = 0; p < k; ++p) s += a[p * m + i] * b[j * k + p];
        c[i * n + j] += s;
      }
  }
}

inline std::size_t outer_count(const Shape& s, std::size_t axis) {
  std::size_t n = 1;
  for (std::size_t i = 0; i < axis; ++i) n *= s[i];
  return n;
}

inline std::size_t inner_count(const Shape& s, std::size_t axis) {
  std::size_t n = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) n *= s[i];
  return n;
}

}  // namespace kernels

/// X[..., k] * W[k x n] -> [..., n]
template <typename T>
Var<T> matmul(const Var<T>& x, const Var<T>& w) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (ws.size() != 2 || xs.empty() || xs.back() != ws[0])
    throw ShapeError("matmul: " + shape_str(xs) + " * " + shape_str(ws));
  const std::size_t k = ws[0], n = ws[1], rows = x.value().size() / k;
  Shape out_shape = xs;
  out_shape.back() = n;
  Tensor<T> out(out_shape);
  kernels::gemm_acc(false, false, rows, n, k, x.value().data().data(), w.value().data().data(),
                    out.data().data());
  return make_result<T>(std::move(out), {x, w}, [rows, n, k](Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& wn = *self.parents[1];
    const T* g = self.grad.data().data();
    if (xn.requires_grad)
      kernels::gemm_acc(false, true, rows, k, n, g, wn.value.data().data(), xn.grad_buffer().data().data());
    if (wn.requires_grad)
      kernels::gemm_acc(true, false, k, n, rows, xn.value.data().data(), g, wn.grad_buffer().data().data());
  });
}

/// Adds b[n] along the last axis.
template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& b) {
  const std::size_t n = b.value().size();
  if (x.shape().empty() || x.shape().back() != n)
    throw ShapeError("add_bias: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  Tensor<T> out = x.value();
  const std::size_t rows = out.size() / n;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] += b.value()[j];
  return make_result<T>(std::move(out), {x, b}, [rows, n](Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& bn = *self.parents[1];
    xn.accumulate(self.grad);
    if (bn.requires_grad) {
      auto& gb = bn.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) gb[j] += self.grad[r * n + j];
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return add_bias(matmul(x, w), b);
}

/// Batch matrix product: A[N x P x Q] (x) B[N x Q x R] -> [N x P x R]. With
/// `transpose_b` B is read as [N x R x Q].
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool transpose_b = false) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != (transpose_b ? bs[2] : bs[1]))
    throw ShapeError("bmm: " + shape_str(as) + " (x) " + shape_str(bs) + (transpose_b ? " (B transposed)" : ""));
  const std::size_t batch = as[0], p = as[1], q = as[2], r = transpose_b ? bs[1] : bs[2];
  Tensor<T> out({batch, p, r});
  for (std::size_t i = 0; i < batch; ++i)
    kernels::gemm_acc(false, transpose_b, p, r, q, a.value().data().data() + i * p * q,
                      b.value().data().data() + i * q * r, out.data().data() + i * p * r);
  return make_result<T>(std::move(out), {a, b}, [batch, p, q, r, transpose_b](Node<T>& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    for (std::size_t i = 0; i < batch; ++i) {
      const T* g = self.grad.data().data() + i * p * r;
      const T* av = an.value.data().data() + i * p * q;
      const T* bv = bn.value.data().data() + i * q * r;
      if (an.requires_grad) {
        // dA = G * B^T  (or G * B when B was transposed)
        kernels::gemm_acc(false, !transpose_b, p, q, r, g, bv, an.grad_buffer().data().data() + i * p * q);
      }
      if (bn.requires_grad) {
        T* gb = bn.grad_buffer().data().data() + i * q * r;
        if (transpose_b)
          kernels::gemm_acc(true, false, r, q, p, g, av, gb);  // dB = G^T A
        else
          kernels::gemm_acc(true, false, q, r, p, av, g, gb);  // dB = A^T G
      }
    }
  });
}

/// Swaps the last two axes of a rank-2 or rank-3 tensor.
template <typename T>
Var<T> transpose_last2(const Var<T>& x) {
  const Shape& s = x.shape();
  if (s.size() != 2 && s.size() != 3) throw ShapeError("transpose_last2: rank " + std::to_string(s.size()));
  const std::size_t batch = s.size() == 3 ? s[0] : 1;
  const std::size_t rows = s[s.size() - 2], cols = s.back();
  Shape os = s;
  std::swap(os[os.size() - 1], os[os.size() - 2]);
  Tensor<T> out(os);
  auto swap_into = [batch, rows, cols](const Tensor<T>& src, Tensor<T>& dst) {
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) dst[b * rows * cols + j * rows + i] += src[b * rows * cols + i * cols + j];
  };
  swap_into(x.value(), out);
  return make_result<T>(std::move(out), {x}, [batch, rows, cols](Node<T>& self) {
    auto& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    auto& g = xn.grad_buffer();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) g[b * rows * cols + i * cols + j] += self.grad[b * rows * cols + j * rows + i];
  });
}

/// Softmax along the last axis, max-subtracted.
template <typename T>
Var<T> softmax_rows(const Var<T>& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.value().size() / n;
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.value().data().data() + r * n;
    T* o = out.data().data() + r * n;
    T m = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j) m = std::max(m, in[j]);
    T z{0};
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - m);
      z += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  return make_result<T>(std::move(out), {x}, [rows, n](Node<T>& self) {
    auto& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    auto& gx = xn.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.data().data() + r * n;
      const T* g = self.grad.data().data() + r * n;
      T dot{0};
      for (std::size_t j = 0; j < n; ++j) dot += y[j] * g[j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[j] * (g[j] - dot);
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
  Tensor<T> out = x.value();
  out *= s;
  return make_result<T>(std::move(out), {x}, [s](Node<T>& self) {
    auto& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    auto& g = xn.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  a.value().require_same_shape(b.value(), "add");
  Tensor<T> out = a.value();
  out += b.value();
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    self.parents[0]->accumulate(self.grad);
    self.parents[1]->accumulate(self.grad);
  });
}

template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
  return add(a, b);
}

/// Sum of several same-shaped values.
template <typename T>
Var<T> add_all(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("add_all: empty input");
  Tensor<T> out = xs.front().value();
  for (std::size_t i = 1; i < xs.size(); ++i) out += xs[i].value();
  return make_result<T>(std::move(out), xs, [](Node<T>& self) {
    for (auto& p : self.parents) p->accumulate(self.grad);
  });
}

/// out[j] = sum_i mix[j, i] * x[i], where x is [L_in x ...] and mix is [L_out x L_in].
template <typename T>
Var<T> mix_sites(const Var<T>& mix, const Var<T>& x) {
  const Shape& ms = mix.shape();
  const Shape& xs = x.shape();
  if (ms.size() != 2 || xs.empty() || ms[1] != xs[0])
    throw ShapeError("mix_sites: " + shape_str(ms) + " with " + shape_str(xs));
  const std::size_t l_out = ms[0], l_in = ms[1], inner = x.value().size() / l_in;
  Shape os = xs;
  os[0] = l_out;
  Tensor<T> out(os);
  kernels::gemm_acc(false, false, l_out, inner, l_in, mix.value().data().data(), x.value().data().data(),
                    out.data().data());
  return make_result<T>(std::move(out), {mix, x}, [l_out, l_in, inner](Node<T>& self) {
    auto& mn = *self.parents[0];
    auto& xn = *self.parents[1];
    const T* g = self.grad.data().data();
    if (mn.requires_grad)
      kernels::gemm_acc(false, true, l_out, l_in, inner, g, xn.value.data().data(), mn.grad_buffer().data().data());
    if (xn.requires_grad)
      kernels::gemm_acc(true, false, l_in, inner, l_out, mn.value.data().data(), g, xn.grad_buffer().data().data());
  });
}

/// 1-D convolution along time with zero "same" padding.
/// x: [L x T x C_in], w: [c x C_in x C_out] (c odd), b: [C_out].
template <typename T>
Var<T> conv1d_same(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 3 || ws.size() != 3 || ws[1] != xs[2] || ws[0] % 2 == 0 || b.value().size() != ws[2])
    throw ShapeError("conv1d_same: input " + shape_str(xs) + " kernel " + shape_str(ws) + " bias " +
                     shape_str(b.shape()));
  const std::size_t sites = xs[0], steps = xs[1], cin = xs[2], width = ws[0], cout = ws[2];
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(width / 2);
  Tensor<T> out({sites, steps, cout});
  const T* xv = x.value().data().data();
  const T* wv = w.value().data().data();
  for (std::size_t l = 0; l < sites; ++l)
    for (std::size_t t = 0; t < steps; ++t) {
      T* o = out.data().data() + (l * steps + t) * cout;
      for (std::size_t j = 0; j < cout; ++j) o[j] = b.value()[j];
      for (std::size_t k = 0; k < width; ++k) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(k) - half;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(steps)) continue;
        kernels::gemm_acc(false, false, 1, cout, cin, xv + (l * steps + src) * cin, wv + k * cin * cout, o);
      }
    }
  return make_result<T>(std::move(out), {x, w, b}, [sites, steps, cin, width, cout, half](Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& wn = *self.parents[1];
    auto& bn = *self.parents[2];
    const T* g = self.grad.data().data();
    if (bn.requires_grad) {
      auto& gb = bn.grad_buffer();
      for (std::size_t r = 0; r < sites * steps; ++r)
        for (std::size_t j = 0; j < cout; ++j) gb[j] += g[r * cout + j];
    }
    T* gx = xn.requires_grad ? xn.grad_buffer().data().data() : nullptr;
    T* gw = wn.requires_grad ? wn.grad_buffer().data().data() : nullptr;
    for (std::size_t l = 0; l < sites; ++l)
      for (std::size_t t = 0; t < steps; ++t) {
        const T* go = g + (l * steps + t) * cout;
        for (std::size_t k = 0; k < width; ++k) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(k) - half;
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(steps)) continue;
          const std::size_t s = static_cast<std::size_t>(src);
          if (gx)
            kernels::gemm_acc(false, true, 1, cin, cout, go, wn.value.data().data() + k * cin * cout,
                              gx + (l * steps + s) * cin);
          if (gw)
            kernels::gemm_acc(true, false, cin, cout, 1, xn.value.data().data() + (l * steps + s) * cin, go,
                              gw + k * cin * cout);
        }
      }
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.storage()) v = v > T{0} ? v : T{0};
  return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    auto& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    auto& g = xn.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xn.value[i] > T{0}) g[i] += self.grad[i];
  });
}

/// Inverted dropout. Identity when rate is 0.
template <typename T, typename Rng>
Var<T> dropout(const Var<T>& x, T rate, Rng& rng) {
  if (rate <= T{0}) return x;
  if (rate >= T{1}) throw ValidationError("dropout rate must be < 1");
  Tensor<T> mask(x.shape());
  std::bernoulli_distribution keep(1.0 - static_cast<double>(rate));
  const T s = T{1} / (T{1} - rate);
  for (auto& m : mask.storage()) m = keep(rng) ? s : T{0};
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return make_result<T>(std::move(out), {x}, [mask = std::move(mask)](Node<T>& self) {
    auto& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    auto& g = xn.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += mask[i] * self.grad[i];
  });
}

/// Max-pool width 2 stride 2 along time. Odd lengths are right-padded by
/// repeating the last step, so the output has ceil(T/2) steps.
template <typename T>
Var<T> maxpool2_time(const Var<T>& x) {
  const Shape& s = x.shape();
  if (s.size() != 3 || s[1] == 0) throw ShapeError("maxpool2_time: " + shape_str(s));
  const std::size_t sites = s[0], steps = s[1], ch = s[2], out_steps = (steps + 1) / 2;
  Tensor<T> out({sites, out_steps, ch});
  std::vector<std::size_t> arg(out.size());
  for (std::size_t l = 0; l < sites; ++l)
    for (std::size_t t = 0; t < out_steps; ++t) {
      const std::size_t t0 = 2 * t;
      const std::size_t t1 = std::min(2 * t + 1, steps - 1);
      for (std::size_t c = 0; c < ch; ++c) {
        const std::size_t i0 = (l * steps + t0) * ch + c;
        const std::size_t i1 = (l * steps + t1) * ch + c;
        const std::size_t o = (l * out_steps + t) * ch + c;
        const bool second = x.value()[i1] > x.value()[i0];
        arg[o] = second ? i1 : i0;
        out[o] = x.value()[arg[o]];
      }
    }
  return make_result<T>(std::move(out), {x}, [arg = std::move(arg)](Node<T>& self) {
    auto& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    auto& g = xn.grad_buffer();
    for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += self.grad[o];
  });
}

/// Nearest-neighbour x2 upsampling along time, trimmed to `out_steps`.
template <typename T>
Var<T> upsample2_time(const Var<T>& x, std::size_t out_steps) {
  const Shape& s = x.shape();
  if (s.size() != 3 || out_steps > 2 * s[1] || out_steps == 0)
    throw ShapeError("upsample2_time: " + shape_str(s) + " to " + std::to_string(out_steps));
  const std::size_t sites = s[0], steps = s[1], ch = s[2];
  Tensor<T> out({sites, out_steps, ch});
  for (std::size_t l = 0; l < sites; ++l)
    for (std::size_t t = 0; t < out_steps; ++t)
      for (std::size_t c = 0; c < ch; ++c) out.at(l, t, c) = x.value().at(l, t / 2, c);
  return make_result<T>(std::move(out), {x}, [sites, steps, ch, out_steps](Node<T>& self) {
    auto& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    auto& g = xn.grad_buffer();
    for (std::size_t l = 0; l < sites; ++l)
      for (std::size_t t = 0; t < out_steps; ++t)
        for (std::size_t c = 0; c < ch; ++c) g[(l * steps + t / 2) * ch + c] += self.grad.at(l, t, c);
  });
}

/// Concatenates along `axis`; all other extents must agree.
template <typename T>
Var<T> concat(const Var<T>& a, const Var<T>& b, std::size_t axis) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  bool ok = as.size() == bs.size() && axis < as.size();
  for (std::size_t i = 0; ok && i < as.size(); ++i) ok = (i == axis) || as[i] == bs[i];
  if (!ok) throw ShapeError("concat axis " + std::to_string(axis) + ": " + shape_str(as) + " with " + shape_str(bs));
  const std::size_t outer = kernels::outer_count(as, axis), inner = kernels::inner_count(as, axis);
  const std::size_t na = as[axis] * inner, nb = bs[axis] * inner;
  Shape os = as;
  os[axis] += bs[axis];
  Tensor<T> out(os);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(a.value().data().data() + o * na, na, out.data().data() + o * (na + nb));
    std::copy_n(b.value().data().data() + o * nb, nb, out.data().data() + o * (na + nb) + na);
  }
  return make_result<T>(std::move(out), {a, b}, [outer, na, nb](Node<T>& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    for (std::size_t o = 0; o < outer; ++o) {
      const T* g = self.grad.data().data() + o * (na + nb);
      if (an.requires_grad) {
        T* ga = an.grad_buffer().data().data() + o * na;
        for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
      }
      if (bn.requires_grad) {
        T* gb = bn.grad_buffer().data().data() + o * nb;
        for (std::size_t i = 0; i < nb; ++i) gb[i] += g[na + i];
      }
    }
  });
}

/// Contiguous range [start, start+count) along `axis`.
template <typename T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t start, std::size_t count) {
  const Shape& s = x.shape();
  if (axis >= s.size() || start + count > s[axis])
    throw ShapeError("slice axis " + std::to_string(axis) + " [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") of " + shape_str(s));
  const std::size_t outer = kernels::outer_count(s, axis), inner = kernels::inner_count(s, axis);
  const std::size_t full = s[axis] * inner, part = count * inner, off = start * inner;
  Shape os = s;
  os[axis] = count;
  Tensor<T> out(os);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.value().data().data() + o * full + off, part, out.data().data() + o * part);
  return make_result<T>(std::move(out), {x}, [outer, full, part, off](Node<T>& self) {
    auto& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    T* g = xn.grad_buffer().data().data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < part; ++i) g[o * full + off + i] += self.grad[o * part + i];
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    auto& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    auto& g = xn.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// x[L x T x D] + rows[L x D] broadcast over time.
template <typename T>
Var<T> add_site_rows(const Var<T>& x, const Var<T>& rows) {
  const Shape& xs = x.shape();
  const Shape& rs = rows.shape();
  if (xs.size() != 3 || rs.size() != 2 || xs[0] != rs[0] || xs[2] != rs[1])
    throw ShapeError("add_site_rows: " + shape_str(xs) + " + " + shape_str(rs));
  const std::size_t sites = xs[0], steps = xs[1], d = xs[2];
  Tensor<T> out = x.value();
  for (std::size_t l = 0; l < sites; ++l)
    for (std::size_t t = 0; t < steps; ++t)
      for (std::size_t j = 0; j < d; ++j) out.at(l, t, j) += rows.value().at(l, j);
  return make_result<T>(std::move(out), {x, rows}, [sites, steps, d](Node<T>& self) {
    self.parents[0]->accumulate(self.grad);
    auto& rn = *self.parents[1];
    if (!rn.requires_grad) return;
    auto& g = rn.grad_buffer();
    for (std::size_t l = 0; l < sites; ++l)
      for (std::size_t t = 0; t < steps; ++t)
        for (std::size_t j = 0; j < d; ++j) g.at(l, j) += self.grad.at(l, t, j);
  });
}

/// Per-site affine map: out[l, ...] = x[l, ...] * gain[l] + offset[l].
template <typename T>
Var<T> site_affine(const Var<T>& x, const Var<T>& gain, const Var<T>& offset) {
  const std::size_t sites = x.dim(0);
  if (gain.value().size() != sites || offset.value().size() != sites)
    throw ShapeError("site_affine: " + shape_str(x.shape()) + " with per-site " + shape_str(gain.shape()));
  const std::size_t inner = x.value().size() / sites;
  Tensor<T> out = x.value();
  for (std::size_t l = 0; l < sites; ++l)
    for (std::size_t i = 0; i < inner; ++i) out[l * inner + i] = out[l * inner + i] * gain.value()[l] + offset.value()[l];
  return make_result<T>(std::move(out), {x, gain, offset}, [sites, inner](Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& gn = *self.parents[1];
    auto& on = *self.parents[2];
    for (std::size_t l = 0; l < sites; ++l)
      for (std::size_t i = 0; i < inner; ++i) {
        const T g = self.grad[l * inner + i];
        if (xn.requires_grad) xn.grad_buffer()[l * inner + i] += g * gn.value[l];
        if (gn.requires_grad) gn.grad_buffer()[l] += g * xn.value[l * inner + i];
        if (on.requires_grad) on.grad_buffer()[l] += g;
      }
  });
}

/// Inverse of site_affine: out = (x - offset[l]) / (gain[l] + eps).
template <typename T>
Var<T> site_affine_inverse(const Var<T>& x, const Var<T>& gain, const Var<T>& offset, T eps) {
  const std::size_t sites = x.dim(0);
  if (gain.value().size() != sites || offset.value().size() != sites)
    throw ShapeError("site_affine_inverse: " + shape_str(x.shape()) + " with per-site " + shape_str(gain.shape()));
  const std::size_t inner = x.value().size() / sites;
  Tensor<T> out = x.value();
  for (std::size_t l = 0; l < sites; ++l)
    for (std::size_t i = 0; i < inner; ++i)
      out[l * inner + i] = (out[l * inner + i] - offset.value()[l]) / (gain.value()[l] + eps);
  return make_result<T>(std::move(out), {x, gain, offset}, [sites, inner, eps](Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& gn = *self.parents[1];
    auto& on = *self.parents[2];
    for (std::size_t l = 0; l < sites; ++l) {
      const T denom = gn.value[l] + eps;
      for (std::size_t i = 0; i < inner; ++i) {
        const T g = self.grad[l * inner + i];
        if (xn.requires_grad) xn.grad_buffer()[l * inner + i] += g / denom;
        if (on.requires_grad) on.grad_buffer()[l] -= g / denom;
        if (gn.requires_grad) gn.grad_buffer()[l] -= g * self.value[l * inner + i] / denom;
      }
    }
  });
}

/// Scalar sum(x * weights) with constant weights.
template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights) {
  x.value().require_same_shape(weights, "weighted_sum");
  T s{0};
  for (std::size_t i = 0; i < weights.size(); ++i) s += x.value()[i] * weights[i];
  return make_result<T>(Tensor<T>({1}, {s}), {x}, [weights](Node<T>& self) {
    auto& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    auto& g = xn.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * weights[i];
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  return weighted_sum(x, Tensor<T>(x.shape(), T{1}));
}

/// Mean squared error against a constant target; scalar result.
template <typename T>
Var<T> mse(const Var<T>& pred, const Tensor<T>& target) {
  if (pred.value().size() != target.size())
    throw ShapeError("mse: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  const std::size_t n = target.size();
  T s{0};
  for (std::size_t i = 0; i < n; ++i) {
    const T d = pred.value()[i] - target[i];
    s += d * d;
  }
  return make_result<T>(Tensor<T>({1}, {s / static_cast<T>(n)}), {pred}, [target, n](Node<T>& self) {
    auto& pn = *self.parents[0];
    if (!pn.requires_grad) return;
    auto& g = pn.grad_buffer();
    const T k = T{2} * self.grad[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) g[i] += k * (pn.value[i] - target[i]);
  });
}

}  // namespace mkst
