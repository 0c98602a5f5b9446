#include "emtal/trainer.hpp"

#include <cstdio>
#include <sstream>

namespace emtal {

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

TrainSettings TrainSettings::finetune(const RunConfig& c) {
  TrainSettings s;
  s.epochs = c.optimizer.epochs;
  s.warmup_epochs = c.optimizer.warmup_epochs;
  s.batch_size = c.optimizer.batch_size;
  s.lr = c.optimizer.lr;
  s.beta1 = c.optimizer.beta1;
  s.beta2 = c.optimizer.beta2;
  s.eps = c.optimizer.eps;
  s.weight_decay = c.optimizer.weight_decay;
  s.qr_enabled = c.qr.enabled;
  s.qr_momentum = c.qr.momentum;
  s.qr_clamp = c.qr.weight_clamp;
  s.qr_after_epoch = c.qr.enabled_after_epoch;
  s.qr_ema = c.qr.ce_mode == "ema";
  s.fading_start = c.fading.start_epoch;
  s.fading_end = c.fading.end_epoch;
  s.seed = Rng(c.seed).substream("shuffle").next_u64();
  s.workers = worker_count();
  return s;
}

TrainSettings TrainSettings::pretraining(const RunConfig& c) {
  TrainSettings s = finetune(c);
  s.epochs = c.pretrain.epochs;
  s.warmup_epochs = c.pretrain.epochs / 10;
  s.lr = c.pretrain.lr;
  s.qr_enabled = false;
  s.seed = Rng(c.seed).substream("pretrain_shuffle").next_u64();
  return s;
}

std::string metrics_csv(const std::vector<EpochMetrics>& history, int n_tasks) {
  std::ostringstream os;
  os << "epoch,lr,alpha";
  for (int t = 0; t < n_tasks; ++t) os << ",ce_t" << t;
  for (int t = 0; t < n_tasks; ++t) os << ",train_acc_t" << t;
  for (int t = 0; t < n_tasks; ++t) os << ",test_acc_t" << t;
  os << ",qr_loss,mean_train_acc,mean_test_acc\n";
  for (const auto& r : history) {
    os << r.epoch << ',' << num(r.lr) << ',' << num(r.alpha);
    for (double v : r.ce) os << ',' << num(v);
    for (double v : r.train_acc) os << ',' << num(v);
    for (double v : r.test_acc) os << ',' << num(v);
    os << ',' << num(r.qr_loss) << ',' << num(r.mean_train_acc) << ',' << num(r.mean_test_acc) << '\n';
  }
  return os.str();
}

}  // namespace emtal
