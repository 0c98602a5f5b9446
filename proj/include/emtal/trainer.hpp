#pragma once

// Multi-task training loop over the merged sample set: cosine schedule,
// AdamW, router fading, and the quality-retaining term.

#include <cstdint>
#include <string>
#include <vector>

#include "emtal/config.hpp"
#include "emtal/model.hpp"
#include "emtal/mole.hpp"
#include "emtal/parallel.hpp"
#include "emtal/qr.hpp"
#include "emtal/taskdata.hpp"

namespace emtal {

struct TrainSettings {
  int epochs = 100;
  int warmup_epochs = 10;
  int batch_size = 32;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  bool qr_enabled = true;
  double qr_momentum = 0.9;
  double qr_clamp = 0.05;
  int qr_after_epoch = 0;
  bool qr_ema = false;
  int fading_start = 50;
  int fading_end = 100;
  std::uint64_t seed = 0;
  int workers = 1;
  // Fixed shard height; gradients are summed shard by shard in order, so
  // results do not depend on `workers`.
  int shard_rows = 64;

  /// Fine-tuning settings (EMTAL or union fine-tuning) from a run config.
  static TrainSettings finetune(const RunConfig& c);
  /// Dense pretraining: CE only, pretrain.epochs at pretrain.lr.
  static TrainSettings pretraining(const RunConfig& c);
};

struct EpochMetrics {
  int epoch = 0;
  double lr = 0;
  double alpha = 1;
  std::vector<double> ce;
  std::vector<double> train_acc;
  std::vector<double> test_acc;
  double qr_loss = 0;
  double mean_train_acc = 0;
  double mean_test_acc = 0;
};

struct TrainSummary {
  std::vector<EpochMetrics> history;
  double final_alpha = 0;
  std::vector<double> final_train_acc;
  std::vector<double> final_test_acc;
  double final_mean_train_acc = 0;
  double final_mean_test_acc = 0;
};

/// Header plus one row per epoch, fixed column order:
/// epoch,lr,alpha,ce_t*,train_acc_t*,test_acc_t*,qr_loss,mean_train_acc,mean_test_acc
std::string metrics_csv(const std::vector<EpochMetrics>& history, int n_tasks);

template <typename T>
struct ShardedPass {
  Mat<T> logits;
  std::vector<NetCache<T>> caches;
  std::vector<Index> begins;
};

template <typename T>
ShardedPass<T> forward_sharded(const ToyNet<T>& net, const Mat<T>& x, int shard_rows, int workers,
                               bool keep_cache = true) {
  ShardedPass<T> pass;
  const Index n = x.rows();
  for (Index b = 0; b < n; b += shard_rows) pass.begins.push_back(b);
  const int shards = static_cast<int>(pass.begins.size());
  pass.caches.resize(keep_cache ? shards : 0);
  std::vector<Mat<T>> parts(shards);
  parallel_for(shards, workers, [&](int s) {
    const Index b = pass.begins[s];
    const Index rows = std::min<Index>(shard_rows, n - b);
    parts[s] = forward(net, Mat<T>(x.middleRows(b, rows)), keep_cache ? &pass.caches[s] : nullptr);
  });
  pass.logits.resize(n, net.n_class());
  for (int s = 0; s < shards; ++s) pass.logits.middleRows(pass.begins[s], parts[s].rows()) = parts[s];
  return pass;
}

template <typename T>
Gradients<T> backward_sharded(const ToyNet<T>& net, const ShardedPass<T>& pass,
                              const Mat<T>& dlogits, int workers) {
  const int shards = static_cast<int>(pass.caches.size());
  std::vector<Gradients<T>> parts(shards);
  parallel_for(shards, workers, [&](int s) {
    const Index b = pass.begins[s];
    const Index rows = pass.caches[s].features.rows();
    parts[s] = backward(net, pass.caches[s], Mat<T>(dlogits.middleRows(b, rows)));
  });
  Gradients<T> total = std::move(parts[0]);
  for (int s = 1; s < shards; ++s)
    for (auto& [name, g] : parts[s]) total[name] += g;
  return total;
}

/// Fraction of correct argmax predictions over the unified label space,
/// per task. Tasks without samples report 0.
template <typename T>
std::vector<double> per_task_accuracy(const ToyNet<T>& net, const Dataset& data, int n_tasks,
                                      int workers = 1, int shard_rows = 256) {
  std::vector<double> correct(n_tasks, 0), total(n_tasks, 0);
  if (data.empty()) return correct;
  const auto batch = make_batch<T>(data);
  const auto pass = forward_sharded(net, batch.x, shard_rows, workers, false);
  for (Index s = 0; s < pass.logits.rows(); ++s) {
    Index pred;
    pass.logits.row(s).maxCoeff(&pred);
    total[batch.task_ids[s]] += 1;
    if (pred == batch.labels[s]) correct[batch.task_ids[s]] += 1;
  }
  for (int t = 0; t < n_tasks; ++t) correct[t] = total[t] > 0 ? correct[t] / total[t] : 0.0;
  return correct;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

/// Trains `net` in place. In the MoLE phase alpha follows the fading
/// schedule per epoch and is set to its end value (0) afterwards. When
/// `bank` is given it receives the final knowledge bank.
template <typename T>
TrainSummary train(ToyNet<T>& net, const Dataset& train_set, const Dataset& test_set,
                   const UnifiedLabelSpace& labels, const TrainSettings& s,
                   KnowledgeBank<T>* bank_out = nullptr) {
  if (train_set.empty()) throw ConfigError("training set is empty");
  if (net.n_class() != labels.n_class)
    throw DimensionError("net head width differs from the unified label space");
  const int n_tasks = labels.n_tasks();
  const bool mole = net.phase() == Phase::mole;

  AdamWState<T> opt;
  opt.beta1 = static_cast<T>(s.beta1);
  opt.beta2 = static_cast<T>(s.beta2);
  opt.eps = static_cast<T>(s.eps);
  opt.weight_decay = static_cast<T>(s.weight_decay);
  KnowledgeBank<T> bank(labels.n_class, static_cast<T>(s.qr_momentum));
  TaskLossTracker<T> tracker(n_tasks, static_cast<T>(s.qr_clamp), s.qr_ema,
                             static_cast<T>(s.qr_momentum));
  auto params = trainable_params(net);

  TrainSummary summary;
  for (int epoch = 0; epoch < s.epochs; ++epoch) {
    const double alpha = mole ? fading_alpha(epoch, s.fading_start, s.fading_end) : 1.0;
    net.set_alpha(static_cast<T>(alpha));
    const bool qr_active = s.qr_enabled && epoch >= s.qr_after_epoch;

    EpochMetrics row;
    row.epoch = epoch;
    row.alpha = alpha;
    row.lr = cosine_lr(epoch, s.lr, s.warmup_epochs, s.epochs);
    std::vector<double> ce_sum(n_tasks, 0), ce_count(n_tasks, 0);
    std::vector<double> hit(n_tasks, 0), seen(n_tasks, 0);

    const auto batches = batch_iter(train_set.size(), s.batch_size, s.seed, epoch);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      opt.lr = static_cast<T>(cosine_lr(epoch + static_cast<double>(b) / batches.size(), s.lr,
                                        s.warmup_epochs, s.epochs));
      const auto batch = make_batch<T>(train_set, batches[b]);
      const auto pass = forward_sharded(net, batch.x, s.shard_rows, s.workers);
      auto tce = task_cross_entropy(pass.logits, batch.labels, batch.task_ids, n_tasks);
      Mat<T> dlogits = tce.grad;
      if (qr_active) {
        const auto w = tracker.weights(tce.loss, tce.count);
        const auto qr = qr_loss(pass.logits, batch.labels, batch.task_ids, bank, w);
        dlogits += qr.grad;
        row.qr_loss += static_cast<double>(qr.loss);
      }
      const auto grads = backward_sharded(net, pass, dlogits, s.workers);
      adamw_step(params, grads, opt);
      if (s.qr_enabled) bank.update_batch(pass.logits, batch.labels);

      for (int t = 0; t < n_tasks; ++t) {
        ce_sum[t] += static_cast<double>(tce.loss[t]) * tce.count[t];
        ce_count[t] += tce.count[t];
      }
      for (Index r = 0; r < pass.logits.rows(); ++r) {
        Index pred;
        pass.logits.row(r).maxCoeff(&pred);
        seen[batch.task_ids[r]] += 1;
        if (pred == batch.labels[r]) hit[batch.task_ids[r]] += 1;
      }
    }
    for (int t = 0; t < n_tasks; ++t) {
      row.ce.push_back(ce_count[t] > 0 ? ce_sum[t] / ce_count[t] : 0.0);
      row.train_acc.push_back(seen[t] > 0 ? hit[t] / seen[t] : 0.0);
    }
    row.qr_loss /= static_cast<double>(batches.size());
    row.test_acc = per_task_accuracy(net, test_set, n_tasks, s.workers);
    row.mean_train_acc = mean_of(row.train_acc);
    row.mean_test_acc = mean_of(row.test_acc);
    summary.history.push_back(std::move(row));
  }

  summary.final_alpha = mole ? fading_alpha(s.epochs, s.fading_start, s.fading_end) : 1.0;
  net.set_alpha(static_cast<T>(summary.final_alpha));
  summary.final_train_acc = per_task_accuracy(net, train_set, n_tasks, s.workers);
  summary.final_test_acc = per_task_accuracy(net, test_set, n_tasks, s.workers);
  summary.final_mean_train_acc = mean_of(summary.final_train_acc);
  summary.final_mean_test_acc = mean_of(summary.final_test_acc);
  if (bank_out) *bank_out = bank;
  return summary;
}

}  // namespace emtal
