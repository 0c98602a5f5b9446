#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace emtal {

struct TaskSpec {
  int classes = 8;
  int train_per_class = 20;
  int test_per_class = 40;
  double noise = 0.3;
  // When set, samples are read from CSV instead of generated.
  std::string train_csv;
  std::string test_csv;
};

struct DataSpec {
  double mean_scale = 3.0;
  std::vector<TaskSpec> tasks;
};

struct RunConfig {
  std::string name = "EMTAL-4";

  struct Model {
    int d_in = 32;
    int D = 64;
    int H = 256;
    int blocks = 2;
  } model;

  int K = 16;
  int rank = 4;
  double tau = 5.0;

  // Negative values mean "derive from optimizer.epochs" (epochs/2, epochs).
  struct Fading {
    int start_epoch = -1;
    int end_epoch = -1;
  } fading;

  struct Qr {
    bool enabled = true;
    double momentum = 0.9;
    double weight_clamp = 0.05;
    int enabled_after_epoch = 0;
    std::string ce_mode = "batch";  // "batch" | "ema"
  } qr;

  struct Optimizer {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    int epochs = 100;
    int warmup_epochs = 10;
    int batch_size = 32;
  } optimizer;

  struct Pretrain {
    int epochs = 20;
    double lr = 3e-3;
  } pretrain;

  DataSpec data;

  std::string strategy = "balanced";  // "balanced" | "contiguous"
  bool cluster_up_only = false;
  int kmeans_iters = 30;
  std::string precision = "f32";  // "f32" | "f64"
  std::uint64_t seed = 0;
};

/// Default desk benchmark: four tasks of increasing difficulty.
DataSpec default_data_spec();

RunConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const RunConfig& c);

/// Fills derived defaults (fading window) then checks every invariant.
/// Throws ConfigError naming the offending field.
void resolve_config(RunConfig& c);
void validate_config(const RunConfig& c);

RunConfig load_config(const std::filesystem::path& path);

/// Rank implied by a named preset such as "EMTAL-2".
std::optional<int> preset_rank(const std::string& name);

}  // namespace emtal
