#include "emtal/pipeline.hpp"

#include <fstream>
#include <iostream>

#include "emtal/analysis.hpp"
#include "emtal/checkpoint.hpp"
#include "emtal/model.hpp"

namespace emtal {

namespace {

bool use_f64(const RunConfig& cfg) { return cfg.precision == "f64"; }

std::string archive_phase(const Archive& ar) {
  if (!ar.meta.contains("phase") || !ar.meta["phase"].is_string())
    throw CorruptionError("archive meta is missing 'phase'");
  return ar.meta["phase"].get<std::string>();
}

void write_text(const fs::path& path, const std::string& text) { write_file_atomic(path, text); }

ExpertPartition make_partition(const DenseFFN<double>& ffn, const MoefyOptions& opt, int layer) {
  if (opt.strategy == "contiguous") return partition_contiguous(static_cast<int>(ffn.H()), opt.K);
  if (opt.strategy != "balanced")
    throw ConfigError("strategy must be 'balanced' or 'contiguous', got '" + opt.strategy + "'");
  Rng rng = Rng(opt.seed).substream("kmeans", static_cast<std::uint64_t>(layer));
  const Mat<double> w = stack_ffn(ffn);
  if (opt.up_only) return partition_balanced_kmeans(w.topRows(ffn.D()), opt.K, opt.kmeans_iters, rng);
  return partition_balanced_kmeans(w, opt.K, opt.kmeans_iters, rng);
}

template <typename T>
TrainSummary train_archive(const RunConfig& cfg, const Archive& in, const fs::path& out) {
  auto data = prepare_data(cfg);
  ToyNet<T> net = net_from_archive<T>(in);
  if (net.d_in() != cfg.model.d_in) throw ConfigError("config field 'model.d_in' differs from the archive");
  if (net.n_class() != data.labels.n_class)
    throw ConfigError("config field 'data.tasks' implies " + std::to_string(data.labels.n_class) +
                      " classes but the archive head has " + std::to_string(net.n_class()));
  if (net.phase() == Phase::mole) {
    for (auto& layer : net.mole_blocks()) {
      layer.router.tau = static_cast<T>(cfg.tau);
      if (layer.rank() != cfg.rank) {
        bool untouched = layer.router.W_r.isZero(0);
        for (const auto& l : layer.lora) untouched = untouched && l.B_up.isZero(0) && l.B_down.isZero(0);
        if (!untouched)
          throw ConfigError("config field 'rank' differs from a trained archive's LoRA rank");
      }
    }
    // Re-initialize LoRA at the configured rank when the archive was MoEfied
    // with another one. Only valid before any update.
    if (!net.mole_blocks().empty() && net.mole_blocks()[0].rank() != cfg.rank) {
      Rng rng = Rng(cfg.seed).substream("lora_reinit");
      for (int l = 0; l < net.n_blocks(); ++l) {
        auto& layer = net.mole_blocks()[l];
        const auto ffn = assemble_ffn(layer.experts, layer.b_down, layer.partition, true);
        Rng lr = rng.substream("layer", static_cast<std::uint64_t>(l));
        layer = make_mole_layer(ffn, layer.ln, layer.partition, cfg.rank, static_cast<T>(cfg.tau), lr);
      }
    }
  }
  KnowledgeBank<T> bank(data.labels.n_class, static_cast<T>(cfg.qr.momentum));
  const auto summary = train(net, data.train, data.test, data.labels, TrainSettings::finetune(cfg), &bank);

  Archive ar = net_to_archive(net);
  bank_to_archive(bank, ar);
  ar.meta["config"] = config_to_json(cfg);
  ar.meta["final_mean_test_acc"] = summary.final_mean_test_acc;
  write_archive(out, ar);
  write_text(sibling(out, ".metrics.csv"), metrics_csv(summary.history, data.labels.n_tasks()));
  Json s = {{"final_alpha", summary.final_alpha},
            {"final_train_acc", summary.final_train_acc},
            {"final_test_acc", summary.final_test_acc},
            {"final_mean_train_acc", summary.final_mean_train_acc},
            {"final_mean_test_acc", summary.final_mean_test_acc},
            {"phase", net.phase() == Phase::mole ? "mole" : "dense"}};
  write_text(sibling(out, ".summary.json"), s.dump(2) + "\n");
  return summary;
}

template <typename T>
TrainSummary pretrain_impl(const RunConfig& cfg, const fs::path& out) {
  auto data = prepare_data(cfg);
  Rng init = Rng(cfg.seed).substream("init");
  auto net = make_dense_net<T>(cfg.model.d_in, cfg.model.D, cfg.model.H, cfg.model.blocks,
                               data.labels.n_class, init);
  const auto summary = train(net, data.train, data.test, data.labels, TrainSettings::pretraining(cfg));
  Archive ar = net_to_archive(net);
  ar.meta["config"] = config_to_json(cfg);
  ar.meta["class_counts"] = data.labels.class_counts;
  write_archive(out, ar);
  write_text(sibling(out, ".metrics.csv"), metrics_csv(summary.history, data.labels.n_tasks()));
  return summary;
}

}  // namespace

fs::path sibling(const fs::path& out, const std::string& suffix) {
  fs::path p = out;
  p += suffix;
  return p;
}

void echo_config(const RunConfig& cfg, const fs::path& out) {
  write_text(sibling(out, ".config.json"), config_to_json(cfg).dump(2) + "\n");
}

TaskData prepare_data(const RunConfig& cfg) {
  TaskData d;
  std::vector<int> counts;
  bool any_csv = false;
  for (const auto& t : cfg.data.tasks) {
    counts.push_back(t.classes);
    any_csv = any_csv || !t.train_csv.empty();
  }
  d.labels = build_label_space(counts);
  if (!any_csv) {
    SyntheticSpec spec;
    spec.d_in = cfg.model.d_in;
    spec.mean_scale = cfg.data.mean_scale;
    spec.seed = Rng(cfg.seed).substream("data").next_u64();
    for (const auto& t : cfg.data.tasks)
      spec.tasks.push_back({t.classes, t.train_per_class, t.test_per_class, t.noise});
    auto syn = generate_synthetic(spec);
    d.train = std::move(syn.train);
    d.test = std::move(syn.test);
    return d;
  }
  for (int t = 0; t < d.labels.n_tasks(); ++t) {
    const auto& ts = cfg.data.tasks[t];
    if (ts.train_csv.empty()) throw ConfigError("config field 'data.tasks[].train_csv' must be set for every task");
    for (auto& s : load_csv(ts.train_csv, t, d.labels)) d.train.push_back(std::move(s));
    if (!ts.test_csv.empty())
      for (auto& s : load_csv(ts.test_csv, t, d.labels)) d.test.push_back(std::move(s));
  }
  for (const auto* set : {&d.train, &d.test})
    for (const auto& s : *set)
      if (static_cast<int>(s.features.size()) != cfg.model.d_in)
        throw ConfigError("config field 'model.d_in' does not match the CSV feature count");
  return d;
}

TrainSummary run_pretrain(const RunConfig& cfg, const fs::path& out) {
  echo_config(cfg, out);
  return use_f64(cfg) ? pretrain_impl<double>(cfg, out) : pretrain_impl<float>(cfg, out);
}

void run_moefy(const fs::path& in, const fs::path& out, const MoefyOptions& opt) {
  const Archive src = read_archive(in);
  if (archive_phase(src) != "dense") throw ConfigError("moefy input must be a dense checkpoint");
  const bool f32 = !src.tensors.empty() && src.tensors.begin()->second.dtype == DType::f32;
  // Partitioning and expert extraction are pure copies, so doing them in
  // double and writing back in the source dtype is exact.
  const auto dense = net_from_archive<double>(src);
  if (opt.rank < 1) throw ConfigError("rank must be >= 1");
  std::vector<ExpertPartition> parts;
  for (int l = 0; l < dense.n_blocks(); ++l) {
    const auto& ffn = dense.dense_blocks()[l].ffn;
    if (opt.K < 1 || ffn.H() % opt.K != 0)
      throw ConfigError("config field 'K' must divide H (K=" + std::to_string(opt.K) +
                        ", H=" + std::to_string(ffn.H()) + ")");
    if (opt.rank > std::min<Index>(ffn.D(), ffn.H() / opt.K))
      throw ConfigError("config field 'rank' must be <= min(D, H/K)");
    parts.push_back(make_partition(ffn, opt, l));
  }
  Rng rng = Rng(opt.seed).substream("lora_init");
  const auto mole = moefy_net(dense, parts, opt.rank, opt.tau, rng);
  Archive ar = net_to_archive(mole, f32 ? DType::f32 : DType::f64);
  for (const char* key : {"config", "class_counts"})
    if (src.meta.contains(key)) ar.meta[key] = src.meta[key];
  ar.meta["strategy"] = opt.strategy;
  write_archive(out, ar);
}

TrainSummary run_train(RunConfig cfg, const fs::path& in, const fs::path& out) {
  const Archive src = read_archive(in);
  if (archive_phase(src) == "mole") {
    const int K = src.meta.value("K", cfg.K);
    cfg.K = K;
  }
  validate_config(cfg);
  echo_config(cfg, out);
  return use_f64(cfg) ? train_archive<double>(cfg, src, out) : train_archive<float>(cfg, src, out);
}

Json ReparamReport::to_json() const {
  return {{"max_abs_logit_diff", max_abs_logit_diff},
          {"weights_equal_base", weights_equal_base},
          {"probe_rows", probe_rows}};
}

ReparamReport run_reparam(const fs::path& in, const fs::path& out, std::uint64_t probe_seed) {
  const Archive src = read_archive(in);
  if (archive_phase(src) != "mole") throw ConfigError("reparam input must be a MoEfied checkpoint");
  if (!src.meta.contains("layers")) throw CorruptionError("archive meta is missing per-layer partitions");
  const double alpha = src.meta.value("alpha", -1.0);
  if (alpha != 0.0)
    throw ConfigError("reparam needs alpha = 0 (router fully faded); archive has alpha = " +
                      std::to_string(alpha) + ". Finish the fading schedule before reparameterizing.");
  const auto mole = net_from_archive<double>(src);
  const auto dense = reparameterize_net(mole, true);

  ReparamReport rep;
  rep.weights_equal_base = true;
  for (int l = 0; l < mole.n_blocks(); ++l) {
    const auto& layer = mole.mole_blocks()[l];
    const auto base = assemble_ffn(layer.experts, layer.b_down, layer.partition, true);
    const auto& got = dense.dense_blocks()[l].ffn;
    auto same = [](const auto& a, const auto& b) {
      return a.size() == b.size() &&
             std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
    };
    rep.weights_equal_base = rep.weights_equal_base && same(base.W_up, got.W_up) &&
                             same(base.b_up, got.b_up) && same(base.W_down, got.W_down) &&
                             same(base.b_down, got.b_down);
  }

  Rng rng = Rng(probe_seed).substream("probe");
  rep.probe_rows = 256;
  const Mat<double> probe = gaussian_matrix<double>(rep.probe_rows, mole.d_in(), 1.0, rng);
  rep.max_abs_logit_diff = (forward(mole, probe) - forward(dense, probe)).cwiseAbs().maxCoeff();

  Archive ar = net_to_archive(dense, DType::f64);
  for (const char* key : {"config", "class_counts", "strategy"})
    if (src.meta.contains(key)) ar.meta[key] = src.meta[key];
  write_archive(out, ar);
  write_text(sibling(out, ".report.json"), rep.to_json().dump(2) + "\n");
  return rep;
}

void run_analyze(const fs::path& in, const fs::path& out_csv, std::optional<int> K,
                 const std::vector<int>& ks, std::uint64_t seed) {
  const Archive src = read_archive(in);
  const auto phase = archive_phase(src);
  const auto net = net_from_archive<double>(src);
  std::vector<SpectralReport> reports;
  for (int l = 0; l < net.n_blocks(); ++l) {
    DenseFFN<double> ffn;
    int k_clusters = K.value_or(16);
    if (phase == "dense") {
      ffn = net.dense_blocks()[l].ffn;
    } else {
      const auto& layer = net.mole_blocks()[l];
      ffn = assemble_ffn(layer.experts, layer.b_down, layer.partition, true);
      if (!K) k_clusters = layer.K();
    }
    auto cmp = compare_partitions(ffn, k_clusters, ks, seed, 30, l);
    reports.push_back(std::move(cmp.balanced));
    reports.push_back(std::move(cmp.contiguous));
  }
  write_text(out_csv, spectral_csv(reports));
}

}  // namespace emtal
