#pragma once

#include <cmath>
#include <optional>
#include <unordered_map>
#include <span>
#include <vector>

#include "twotower/common.hpp"
#include "twotower/tensor.hpp"

namespace twotower {

template <class T>
struct LossOutput {
  double loss = 0;  // mean negative log-likelihood over the batch
  std::vector<double> row_loss;
  Matrix<T> grad_q;
  Matrix<T> grad_d;
  double in_batch_accuracy = 0;
};

/// Sampled softmax over in-batch documents. Logits are S[i][j] = <q_i, d_j> -
/// c_j where c is the optional per-document correction; row i's positive is
/// column i. Accuracy counts rows whose argmax (lowest j on ties) is i.
template <class T>
LossOutput<T> in_batch_softmax_loss(const Matrix<T>& q, const Matrix<T>& d,
                                    std::optional<std::span<const double>> correction = std::nullopt) {
  const std::size_t B = q.rows, k = q.cols;
  if (d.rows != B || d.cols != k) throw Error("in_batch_softmax_loss: shape mismatch");
  if (B < 2) throw Error("in_batch_softmax_loss: batch must hold at least 2 pairs");
  if (correction && correction->size() != B) throw Error("in_batch_softmax_loss: correction size");
  for (T v : q.data)
    if (!std::isfinite(static_cast<double>(v))) throw Error("in_batch_softmax_loss: non-finite query");
  for (T v : d.data)
    if (!std::isfinite(static_cast<double>(v))) throw Error("in_batch_softmax_loss: non-finite doc");

  LossOutput<T> out;
  out.grad_q = Matrix<T>(B, k);
  out.grad_d = Matrix<T>(B, k);
  std::vector<double> s(B);
  out.row_loss.resize(B);
  std::size_t correct = 0;
  double total = 0;
  for (std::size_t i = 0; i < B; ++i) {
    double mx = -INFINITY;
    std::size_t arg = 0;
    for (std::size_t j = 0; j < B; ++j) {
      double v = 0;
      for (std::size_t c = 0; c < k; ++c) v += static_cast<double>(q(i, c)) * static_cast<double>(d(j, c));
      if (correction) v -= (*correction)[j];
      s[j] = v;
      if (v > mx) {
        mx = v;
        arg = j;
      }
    }
    correct += arg == i;
    double z = 0;
    for (std::size_t j = 0; j < B; ++j) z += std::exp(s[j] - mx);
    const double logz = mx + std::log(z);
    out.row_loss[i] = logz - s[i];
    total += out.row_loss[i];
    for (std::size_t j = 0; j < B; ++j) {
      const double p = std::exp(s[j] - logz);
      const double g = (p - (i == j ? 1.0 : 0.0)) / static_cast<double>(B);
      for (std::size_t c = 0; c < k; ++c) {
        out.grad_q(i, c) += static_cast<T>(g * static_cast<double>(d(j, c)));
        out.grad_d(j, c) += static_cast<T>(g * static_cast<double>(q(i, c)));
      }
    }
  }
  out.loss = total / static_cast<double>(B);
  out.in_batch_accuracy = static_cast<double>(correct) / static_cast<double>(B);
  return out;
}

/// -log softmax at `gold` over every document in `docs`.
template <class T>
double full_softmax_loss(std::span<const T> q, const Matrix<T>& docs, std::size_t gold) {
  if (gold >= docs.rows) throw Error("full_softmax_loss: gold index out of range");
  if (q.size() != docs.cols) throw Error("full_softmax_loss: dimension mismatch");
  std::vector<double> s(docs.rows);
  double mx = -INFINITY;
  for (std::size_t j = 0; j < docs.rows; ++j) {
    double v = 0;
    for (std::size_t c = 0; c < q.size(); ++c) v += static_cast<double>(q[c]) * static_cast<double>(docs(j, c));
    s[j] = v;
    mx = std::max(mx, v);
  }
  double z = 0;
  for (double v : s) z += std::exp(v - mx);
  return mx + std::log(z) - s[gold];
}

/// Streaming document-frequency counter for the log-frequency correction:
/// c_j = log(count(doc_j) / total).
class FrequencyCounter {
 public:
  void observe(std::uint64_t key) {
    ++counts_[key];
    ++total_;
  }
  double log_frequency(std::uint64_t key) const {
    auto it = counts_.find(key);
    const double c = it == counts_.end() ? 1.0 : static_cast<double>(it->second);
    return std::log(c / static_cast<double>(std::max<std::uint64_t>(total_, 1)));
  }

 private:
  std::unordered_map<std::uint64_t, std::uint64_t> counts_;
  std::uint64_t total_ = 0;
};

}  // namespace twotower
