#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <thread>
#include <vector>

#include "twotower/common.hpp"

namespace twotower {

/// Dense row-major matrix.
template <class T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, T fill = T(0)) : rows(r), cols(c), data(r * c, fill) {}

  std::span<T> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const T> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  T& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  bool operator==(const Matrix&) const = default;
};

namespace kernels {

template <class T>
inline T dot(const T* a, const T* b, std::size_t n) {
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <class T>
inline void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

/// Y[rows, out] = X[rows, in] W[in, out] + b
template <class T>
inline void linear(const T* x, std::size_t rows, std::size_t in, const T* w, const T* b,
                   std::size_t out, T* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    T* yr = y + r * out;
    if (b) std::copy(b, b + out, yr);
    else std::fill(yr, yr + out, T(0));
    const T* xr = x + r * in;
    for (std::size_t i = 0; i < in; ++i) axpy(xr[i], w + i * out, yr, out);
  }
}

/// Accumulates dW += X^T dY, db += colsum(dY), and dX (+)= dY W^T.
template <class T>
inline void linear_backward(const T* x, std::size_t rows, std::size_t in, const T* w,
                            std::size_t out, const T* dy, T* dx, bool accumulate_dx, T* dw,
                            T* db) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* dyr = dy + r * out;
    const T* xr = x + r * in;
    if (db) axpy(T(1), dyr, db, out);
    for (std::size_t i = 0; i < in; ++i) {
      axpy(xr[i], dyr, dw + i * out, out);
      if (dx) {
        const T g = dot(dyr, w + i * out, out);
        if (accumulate_dx) dx[r * in + i] += g;
        else dx[r * in + i] = g;
      }
    }
  }
}

/// Row-wise LayerNorm; stores normalized values and inverse std for backward.
template <class T>
inline void layer_norm(const T* x, std::size_t rows, std::size_t n, const T* gain,
                       const T* shift, T eps, T* xhat, T* rstd, T* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * n;
    T mean = 0;
    for (std::size_t i = 0; i < n; ++i) mean += xr[i];
    mean /= static_cast<T>(n);
    T var = 0;
    for (std::size_t i = 0; i < n; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<T>(n);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t i = 0; i < n; ++i) {
      const T h = (xr[i] - mean) * rs;
      xhat[r * n + i] = h;
      y[r * n + i] = gain[i] * h + shift[i];
    }
  }
}

/// dx (+)= LayerNorm backward; accumulates dgain, dshift.
template <class T>
inline void layer_norm_backward(const T* xhat, const T* rstd, std::size_t rows, std::size_t n,
                                const T* gain, const T* dy, T* dx, bool accumulate_dx, T* dgain,
                                T* dshift) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* h = xhat + r * n;
    const T* g = dy + r * n;
    T mean_d = 0, mean_dh = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const T d = g[i] * gain[i];
      mean_d += d;
      mean_dh += d * h[i];
      dgain[i] += g[i] * h[i];
      dshift[i] += g[i];
    }
    mean_d /= static_cast<T>(n);
    mean_dh /= static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T d = g[i] * gain[i];
      const T v = rstd[r] * (d - mean_d - h[i] * mean_dh);
      if (accumulate_dx) dx[r * n + i] += v;
      else dx[r * n + i] = v;
    }
  }
}

template <class T>
inline T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(M_SQRT1_2)));
}

template <class T>
inline T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(M_SQRT1_2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.3989422804014327);
  return cdf + x * pdf;
}

}  // namespace kernels

/// Runs fn(begin, end, worker) over contiguous chunks of [0, n). Chunk
/// boundaries depend only on n and the worker count.
inline void parallel_chunks(std::size_t n, std::size_t workers,
                            const std::function<void(std::size_t, std::size_t, std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    fn(0, n, 0);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    const std::size_t per = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t b = w * per, e = std::min(n, b + per);
      if (b >= e) break;
      pool.emplace_back([&fn, &errors, b, e, w] {
        try {
          fn(b, e, w);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace twotower
