#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "twotower/common.hpp"

namespace twotower {

struct AdamConfig {
  double lr_peak = 1e-3;
  double warmup_fraction = 0.1;
  std::size_t total_steps = 1000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Linear warm-up to lr_peak at W = warmup_fraction * total_steps, then
/// linear decay to 0 at total_steps. Steps past the end get 0.
inline double learning_rate(const AdamConfig& c, std::size_t t) {
  const double T = static_cast<double>(c.total_steps);
  const double W = c.warmup_fraction * T;
  const double s = static_cast<double>(t);
  if (t > c.total_steps || c.total_steps == 0) return 0.0;
  if (W > 0 && s <= W) return c.lr_peak * s / W;
  if (T <= W) return c.lr_peak;
  return c.lr_peak * (T - s) / (T - W);
}

template <class T>
struct OptimizerState {
  AdamConfig config;
  std::size_t t = 0;
  std::vector<T> m;
  std::vector<T> v;

  OptimizerState() = default;
  OptimizerState(AdamConfig c, std::size_t n) : config(c), m(n, T(0)), v(n, T(0)) {}
};

/// One Adam step with bias correction; returns the learning rate used.
template <class T>
double adam_step(std::span<T> params, std::span<const T> grads, OptimizerState<T>& st) {
  if (params.size() != grads.size() || params.size() != st.m.size())
    throw Error("adam_step: shape mismatch");
  const auto& c = st.config;
  ++st.t;
  const double lr = learning_rate(c, st.t);
  if (lr == 0.0) return 0.0;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.t));
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  const T step = static_cast<T>(lr / bc1);
  const T inv_bc2 = static_cast<T>(1.0 / bc2);
  const T eps = static_cast<T>(c.epsilon);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const T g = grads[i];
    st.m[i] = b1 * st.m[i] + (T(1) - b1) * g;
    st.v[i] = b2 * st.v[i] + (T(1) - b2) * g * g;
    params[i] -= step * st.m[i] / (std::sqrt(st.v[i] * inv_bc2) + eps);
  }
  return lr;
}

}  // namespace twotower
