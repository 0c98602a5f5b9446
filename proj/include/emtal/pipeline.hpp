#pragma once

// Subcommand bodies shared by the CLI and the integration tests. Each
// writes its outputs next to `out`: <out>.metrics.csv, <out>.config.json, ...

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "emtal/archive.hpp"
#include "emtal/config.hpp"
#include "emtal/taskdata.hpp"
#include "emtal/trainer.hpp"

namespace emtal {

namespace fs = std::filesystem;

struct TaskData {
  UnifiedLabelSpace labels;
  Dataset train;
  Dataset test;
};

/// Loads CSVs where the config names them, otherwise generates the
/// synthetic benchmark from the "data" substream of the config seed.
TaskData prepare_data(const RunConfig& cfg);

fs::path sibling(const fs::path& out, const std::string& suffix);

/// Writes the resolved config JSON next to `out`.
void echo_config(const RunConfig& cfg, const fs::path& out);

TrainSummary run_pretrain(const RunConfig& cfg, const fs::path& out);

struct MoefyOptions {
  int K = 16;
  int rank = 4;
  double tau = 5.0;
  std::string strategy = "balanced";
  bool up_only = false;
  int kmeans_iters = 30;
  std::uint64_t seed = 0;
};

void run_moefy(const fs::path& in, const fs::path& out, const MoefyOptions& opt);

/// EMTAL training on a MoEfied archive, or union fine-tuning on a dense one.
TrainSummary run_train(RunConfig cfg, const fs::path& in, const fs::path& out);

struct ReparamReport {
  double max_abs_logit_diff = 0;
  bool weights_equal_base = false;
  int probe_rows = 0;
  Json to_json() const;
};

/// Folds a trained MoLE archive (alpha must be 0) into a dense f64 archive.
ReparamReport run_reparam(const fs::path& in, const fs::path& out, std::uint64_t probe_seed = 0);

void run_analyze(const fs::path& in, const fs::path& out_csv, std::optional<int> K,
                 const std::vector<int>& ks, std::uint64_t seed);

}  // namespace emtal
