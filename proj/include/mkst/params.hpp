#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mkst/autograd.hpp"

namespace mkst {

template <typename T>
struct NamedParam {
  std::string name;
  Var<T> var;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

/// Trainable leaf drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename T, typename Rng>
Var<T> fan_in_param(Shape shape, std::size_t fan_in, Rng& rng) {
  const T bound = T{1} / std::sqrt(static_cast<T>(fan_in));
  return Var<T>(Tensor<T>::uniform(std::move(shape), -bound, bound, rng), true);
}

template <typename T>
Var<T> zero_param(Shape shape) {
  return Var<T>(Tensor<T>(std::move(shape)), true);
}

template <typename T>
Var<T> constant(Tensor<T> value) {
  return Var<T>(std::move(value), false);
}

template <typename T>
std::size_t count_scalars(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.var.value().size();
  return n;
}

template <typename T>
void zero_grads(ParamList<T>& params) {
  for (auto& p : params) p.var.zero_grad();
}

}  // namespace mkst
