#pragma once

// Quality-retaining objective: per-task cross-entropy, an EMA bank of class
// logits used as a detached teacher, and the reciprocal-loss weighted
// distillation term.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "emtal/errors.hpp"
#include "emtal/linalg.hpp"

namespace emtal {

template <typename T>
struct LossAndGrad {
  T loss = 0;
  Mat<T> grad;  // w.r.t. logits
};

inline void check_label(int label, Index n_class) {
  if (label < 0 || label >= n_class)
    throw DimensionError("label " + std::to_string(label) + " outside [0, " +
                         std::to_string(n_class) + ")");
}

/// Mean over the batch of -log softmax(z)[label]; gradient (softmax - onehot) / N.
template <typename T>
LossAndGrad<T> cross_entropy(const Mat<T>& logits, const std::vector<int>& labels) {
  if (static_cast<Index>(labels.size()) != logits.rows())
    throw DimensionError("cross_entropy: one label per row required");
  const Index n = logits.rows();
  LossAndGrad<T> out;
  out.grad = softmax_rows(logits);
  for (Index s = 0; s < n; ++s) {
    check_label(labels[s], logits.cols());
    const auto row = logits.row(s);
    const T mx = row.maxCoeff();
    const T lse = mx + std::log((row.array() - mx).exp().sum());
    out.loss += lse - row(labels[s]);
    out.grad(s, labels[s]) -= T(1);
  }
  if (n > 0) {
    out.loss /= static_cast<T>(n);
    out.grad /= static_cast<T>(n);
  }
  return out;
}

/// Cross-entropy averaged separately within each task. `grad` is the
/// gradient of the sum of the per-task means.
template <typename T>
struct TaskCrossEntropy {
  std::vector<T> loss;
  std::vector<int> count;
  Mat<T> grad;
};

template <typename T>
TaskCrossEntropy<T> task_cross_entropy(const Mat<T>& logits, const std::vector<int>& labels,
                                       const std::vector<int>& task_ids, int n_tasks) {
  if (static_cast<Index>(labels.size()) != logits.rows() || labels.size() != task_ids.size())
    throw DimensionError("task_cross_entropy: labels and task ids must match batch rows");
  TaskCrossEntropy<T> out;
  out.loss.assign(n_tasks, T(0));
  out.count.assign(n_tasks, 0);
  out.grad = softmax_rows(logits);
  for (std::size_t s = 0; s < labels.size(); ++s) {
    if (task_ids[s] < 0 || task_ids[s] >= n_tasks) throw DimensionError("task id out of range");
    ++out.count[task_ids[s]];
  }
  for (Index s = 0; s < logits.rows(); ++s) {
    check_label(labels[s], logits.cols());
    const int t = task_ids[s];
    const auto row = logits.row(s);
    const T mx = row.maxCoeff();
    const T lse = mx + std::log((row.array() - mx).exp().sum());
    const T inv = T(1) / static_cast<T>(out.count[t]);
    out.loss[t] += (lse - row(labels[s])) * inv;
    out.grad(s, labels[s]) -= T(1);
    out.grad.row(s) *= inv;
  }
  return out;
}

/// N_class x N_class bank of EMA logits; row c is the teacher for class c.
template <typename T>
class KnowledgeBank {
 public:
  KnowledgeBank(int n_class, T momentum)
      : z_(Mat<T>::Zero(n_class, n_class)), initialized_(n_class, 0), momentum_(momentum) {
    if (!(momentum > 0 && momentum < 1)) throw ConfigError("qr.momentum must lie in (0, 1)");
  }

  int n_class() const { return static_cast<int>(z_.rows()); }
  T momentum() const { return momentum_; }
  const Mat<T>& Z() const { return z_; }
  Mat<T>& Z() { return z_; }
  bool initialized(int c) const { return initialized_.at(c) != 0; }
  const std::vector<char>& initialized_flags() const { return initialized_; }
  void set_initialized(int c, bool v) { initialized_.at(c) = v ? 1 : 0; }

  /// First write copies z; later writes mix m * row + (1 - m) * z.
  template <typename Derived>
  void update(int label, const Eigen::MatrixBase<Derived>& z) {
    check_label(label, z_.rows());
    if (z.size() != z_.cols()) throw DimensionError("bank update: logit width must be N_class");
    if (!initialized_[label]) {
      for (Index j = 0; j < z_.cols(); ++j) z_(label, j) = static_cast<T>(z(j));
      initialized_[label] = 1;
    } else {
      for (Index j = 0; j < z_.cols(); ++j)
        z_(label, j) += (T(1) - momentum_) * (static_cast<T>(z(j)) - z_(label, j));
    }
  }

  /// Applies one update per row, in batch order.
  void update_batch(const Mat<T>& logits, const std::vector<int>& labels) {
    for (Index s = 0; s < logits.rows(); ++s) update(labels.at(s), logits.row(s).transpose());
  }

 private:
  Mat<T> z_;
  std::vector<char> initialized_;
  T momentum_;
};

template <typename T, typename Derived>
void ema_update(KnowledgeBank<T>& bank, int label, const Eigen::MatrixBase<Derived>& z) {
  bank.update(label, z);
}

/// Supplies the per-task distillation weights 1 / max(L_CE_t, clamp).
/// In "ema" mode the loss is a running average rather than the current batch.
template <typename T>
class TaskLossTracker {
 public:
  TaskLossTracker(int n_tasks, T clamp, bool use_ema = false, T momentum = T(0.9))
      : clamp_(clamp), use_ema_(use_ema), momentum_(momentum), ema_(n_tasks, T(0)),
        seen_(n_tasks, 0) {}

  /// Records this batch's per-task CE and returns the weights to use for it.
  /// Tasks absent from the batch get weight 0.
  std::vector<T> weights(const std::vector<T>& batch_ce, const std::vector<int>& counts) {
    std::vector<T> w(batch_ce.size(), T(0));
    for (std::size_t t = 0; t < batch_ce.size(); ++t) {
      if (counts[t] == 0) continue;
      T loss = batch_ce[t];
      if (use_ema_) {
        ema_[t] = seen_[t] ? momentum_ * ema_[t] + (T(1) - momentum_) * loss : loss;
        seen_[t] = 1;
        loss = ema_[t];
      }
      w[t] = T(1) / std::max(loss, clamp_);
    }
    return w;
  }

 private:
  T clamp_;
  bool use_ema_;
  T momentum_;
  std::vector<T> ema_;
  std::vector<char> seen_;
};

/// sum_t w_t * sum_{s in task t} KL(softmax(z_s) || softmax(Z[label_s])).
/// Bank rows and weights are constants; rows never written contribute 0.
template <typename T>
LossAndGrad<T> qr_loss(const Mat<T>& logits, const std::vector<int>& labels,
                       const std::vector<int>& task_ids, const KnowledgeBank<T>& bank,
                       const std::vector<T>& task_weights, T eps = T(kKlEps)) {
  if (logits.cols() != bank.n_class()) throw DimensionError("qr_loss: logit width must be N_class");
  if (static_cast<Index>(labels.size()) != logits.rows() || labels.size() != task_ids.size())
    throw DimensionError("qr_loss: labels and task ids must match batch rows");
  LossAndGrad<T> out;
  out.grad = Mat<T>::Zero(logits.rows(), logits.cols());
  for (Index s = 0; s < logits.rows(); ++s) {
    const int label = labels[s];
    check_label(label, logits.cols());
    const int t = task_ids[s];
    if (t < 0 || t >= static_cast<int>(task_weights.size())) throw DimensionError("task id out of range");
    if (!bank.initialized(label) || task_weights[t] == T(0)) continue;
    const Vec<T> p = softmax(logits.row(s).transpose());
    const Vec<T> q = softmax(bank.Z().row(label).transpose());
    const T w = task_weights[t];
    out.loss += w * kl_divergence(p, q, eps);
    // d/dp_i of p_i ln((p_i+eps)/(q_i+eps)), then through the softmax Jacobian
    const Vec<T> g = ((p.array() + eps).log() - (q.array() + eps).log() +
                      p.array() / (p.array() + eps)).matrix();
    const T pg = p.dot(g);
    out.grad.row(s) = (w * (p.array() * (g.array() - pg))).matrix().transpose();
  }
  return out;
}

/// L = sum_t L_CE_t + L_QR
template <typename T>
T total_loss(const std::vector<T>& task_ce, T qr) {
  T s = 0;
  for (T v : task_ce) s += v;
  return s + qr;
}

}  // namespace emtal
