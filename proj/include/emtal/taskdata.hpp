#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "emtal/linalg.hpp"

namespace emtal {

/// All tasks' classes concatenated into one space; task t owns the global
/// ids [offsets[t], offsets[t] + class_counts[t]).
struct UnifiedLabelSpace {
  std::vector<int> class_counts;
  std::vector<int> offsets;
  int n_class = 0;

  int n_tasks() const { return static_cast<int>(class_counts.size()); }
  int to_global(int task, int local) const;
  std::pair<int, int> to_local(int global) const;
};

UnifiedLabelSpace build_label_space(const std::vector<int>& class_counts);

struct TaskSample {
  std::vector<double> features;
  int global_label = 0;
  int task_id = 0;

  bool operator==(const TaskSample&) const = default;
};

using Dataset = std::vector<TaskSample>;

struct SyntheticTask {
  int classes = 2;
  int train_per_class = 20;
  int test_per_class = 20;
  double noise = 0.5;
};

struct SyntheticSpec {
  int d_in = 32;
  double mean_scale = 1.0;
  std::vector<SyntheticTask> tasks;
  std::uint64_t seed = 0;
};

struct SyntheticData {
  UnifiedLabelSpace labels;
  Dataset train;
  Dataset test;
  std::vector<std::vector<double>> class_means;  // indexed by global label
};

/// Gaussian blobs: each class mean is drawn with per-coordinate std
/// mean_scale / sqrt(d_in) (so its norm is about mean_scale) and samples add
/// isotropic noise of the task's std.
SyntheticData generate_synthetic(const SyntheticSpec& spec);

/// Rows of `d_in` floats followed by an integer local label. Labels are
/// remapped into the unified space.
Dataset load_csv(const std::filesystem::path& path, int task_id, const UnifiedLabelSpace& labels);

/// Index batches covering a seeded permutation of [0, n) exactly once.
std::vector<std::vector<int>> batch_iter(std::size_t n, int batch_size, std::uint64_t seed,
                                         int epoch);

template <typename T>
struct Batch {
  Mat<T> x;
  std::vector<int> labels;
  std::vector<int> task_ids;
};

template <typename T>
Batch<T> make_batch(const Dataset& data, const std::vector<int>& indices) {
  Batch<T> b;
  const Index d = indices.empty() ? 0 : static_cast<Index>(data.at(indices[0]).features.size());
  b.x.resize(static_cast<Index>(indices.size()), d);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto& s = data.at(indices[r]);
    for (Index c = 0; c < d; ++c) b.x(static_cast<Index>(r), c) = static_cast<T>(s.features[c]);
    b.labels.push_back(s.global_label);
    b.task_ids.push_back(s.task_id);
  }
  return b;
}

template <typename T>
Batch<T> make_batch(const Dataset& data) {
  std::vector<int> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
  return make_batch<T>(data, all);
}

}  // namespace emtal
