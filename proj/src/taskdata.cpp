#include "emtal/taskdata.hpp"

#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <string>

#include "emtal/errors.hpp"
#include "emtal/rng.hpp"

namespace emtal {

int UnifiedLabelSpace::to_global(int task, int local) const {
  if (task < 0 || task >= n_tasks()) throw DimensionError("task id out of range");
  if (local < 0 || local >= class_counts[task])
    throw DimensionError("local label " + std::to_string(local) + " out of range for task " +
                         std::to_string(task));
  return offsets[task] + local;
}

std::pair<int, int> UnifiedLabelSpace::to_local(int global) const {
  if (global < 0 || global >= n_class) throw DimensionError("global label out of range");
  int t = n_tasks() - 1;
  while (offsets[t] > global) --t;
  return {t, global - offsets[t]};
}

UnifiedLabelSpace build_label_space(const std::vector<int>& class_counts) {
  if (class_counts.empty()) throw ConfigError("label space needs at least one task");
  UnifiedLabelSpace s;
  for (int c : class_counts) {
    if (c < 1) throw ConfigError("every task needs at least one class");
    s.offsets.push_back(s.n_class);
    s.class_counts.push_back(c);
    s.n_class += c;
  }
  return s;
}

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  std::vector<int> counts;
  for (const auto& t : spec.tasks) {
    if (t.classes < 1 || t.train_per_class < 1 || t.test_per_class < 1)
      throw ConfigError("synthetic task counts must be >= 1");
    if (!(t.noise > 0)) throw ConfigError("synthetic task noise must be > 0");
    counts.push_back(t.classes);
  }
  SyntheticData out;
  out.labels = build_label_space(counts);
  const Rng root(spec.seed);
  const double mean_std = spec.mean_scale / std::sqrt(static_cast<double>(spec.d_in));

  for (int t = 0; t < out.labels.n_tasks(); ++t) {
    const auto& task = spec.tasks[t];
    Rng mean_rng = root.substream("class_means", t);
    Rng train_rng = root.substream("train", t);
    Rng test_rng = root.substream("test", t);
    for (int c = 0; c < task.classes; ++c) {
      std::vector<double> mean(spec.d_in);
      for (auto& v : mean) v = mean_rng.normal(0.0, mean_std);
      const int global = out.labels.to_global(t, c);
      auto draw = [&](Rng& rng, int n, Dataset& into) {
        for (int i = 0; i < n; ++i) {
          TaskSample s;
          s.features.resize(spec.d_in);
          for (int d = 0; d < spec.d_in; ++d) s.features[d] = mean[d] + rng.normal(0.0, task.noise);
          s.global_label = global;
          s.task_id = t;
          into.push_back(std::move(s));
        }
      };
      draw(train_rng, task.train_per_class, out.train);
      draw(test_rng, task.test_per_class, out.test);
      out.class_means.push_back(std::move(mean));
    }
  }
  return out;
}

Dataset load_csv(const std::filesystem::path& path, int task_id, const UnifiedLabelSpace& labels) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  if (task_id < 0 || task_id >= labels.n_tasks()) throw DimensionError("task id out of range");
  Dataset out;
  std::string line;
  int line_no = 0;
  std::size_t width = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const auto where = path.string() + ":" + std::to_string(line_no);
    std::vector<double> fields;
    std::size_t pos = 0;
    while (true) {
      const auto comma = line.find(',', pos);
      const std::string cell = line.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
      const char* begin = cell.c_str();
      char* end = nullptr;
      errno = 0;
      const double v = std::strtod(begin, &end);
      while (end && (*end == ' ' || *end == '\t')) ++end;
      if (end == begin || *end != '\0' || errno == ERANGE || !std::isfinite(v))
        throw FormatError(where + ": cannot parse '" + cell + "' as a number");
      fields.push_back(v);
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    if (fields.size() < 2) throw FormatError(where + ": need at least one feature and a label");
    if (width == 0) width = fields.size();
    if (fields.size() != width)
      throw FormatError(where + ": expected " + std::to_string(width) + " columns, got " +
                        std::to_string(fields.size()));
    const double raw = fields.back();
    if (raw != std::floor(raw)) throw FormatError(where + ": label must be an integer");
    const int local = static_cast<int>(raw);
    if (local < 0 || local >= labels.class_counts[task_id])
      throw DimensionError(where + ": label " + std::to_string(local) + " outside [0, " +
                           std::to_string(labels.class_counts[task_id]) + ")");
    fields.pop_back();
    out.push_back({std::move(fields), labels.to_global(task_id, local), task_id});
  }
  return out;
}

std::vector<std::vector<int>> batch_iter(std::size_t n, int batch_size, std::uint64_t seed,
                                         int epoch) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  std::vector<int> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
  Rng rng = Rng(seed).substream("shuffle", static_cast<std::uint64_t>(epoch));
  rng.shuffle(order);
  std::vector<std::vector<int>> batches;
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(n, i + static_cast<std::size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<long>(i), order.begin() + static_cast<long>(end));
  }
  return batches;
}

}  // namespace emtal
