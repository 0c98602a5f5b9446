#include "emtal/config.hpp"

#include <regex>
#include <set>

#include "emtal/archive.hpp"
#include "emtal/errors.hpp"

namespace emtal {

namespace {

void reject_unknown(const Json& j, const std::string& where, std::set<std::string> allowed) {
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key))
      throw ConfigError("unknown config field '" + where + (where.empty() ? "" : ".") + key + "'");
  }
}

template <typename V>
void read(const Json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const Json::exception&) {
    throw ConfigError("config field '" + where + (where.empty() ? "" : ".") + key +
                      "' has the wrong type");
  }
}

void require(bool ok, const std::string& field, const std::string& why) {
  if (!ok) throw ConfigError("config field '" + field + "' " + why);
}

}  // namespace

DataSpec default_data_spec() {
  DataSpec d;
  const int classes[] = {8, 8, 6, 6};
  const double noise[] = {0.3, 0.6, 1.0, 1.5};
  for (int t = 0; t < 4; ++t) {
    TaskSpec ts;
    ts.classes = classes[t];
    ts.noise = noise[t];
    d.tasks.push_back(ts);
  }
  return d;
}

std::optional<int> preset_rank(const std::string& name) {
  static const std::regex re("EMTAL-([0-9]+)");
  std::smatch m;
  if (std::regex_match(name, m, re)) return std::stoi(m[1].str());
  return std::nullopt;
}

RunConfig config_from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  reject_unknown(j, "",
                 {"name", "model", "K", "rank", "tau", "fading", "qr", "optimizer", "pretrain",
                  "data", "strategy", "cluster_up_only", "kmeans_iters", "precision", "seed"});
  RunConfig c;
  read(j, "name", c.name, "");
  if (auto r = preset_rank(c.name)) c.rank = *r;

  if (j.contains("model")) {
    const auto& m = j["model"];
    reject_unknown(m, "model", {"d_in", "D", "H", "blocks"});
    read(m, "d_in", c.model.d_in, "model");
    read(m, "D", c.model.D, "model");
    read(m, "H", c.model.H, "model");
    read(m, "blocks", c.model.blocks, "model");
  }
  read(j, "K", c.K, "");
  read(j, "rank", c.rank, "");
  read(j, "tau", c.tau, "");
  if (j.contains("fading")) {
    const auto& f = j["fading"];
    reject_unknown(f, "fading", {"start_epoch", "end_epoch"});
    read(f, "start_epoch", c.fading.start_epoch, "fading");
    read(f, "end_epoch", c.fading.end_epoch, "fading");
  }
  if (j.contains("qr")) {
    const auto& q = j["qr"];
    reject_unknown(q, "qr", {"enabled", "momentum", "weight_clamp", "enabled_after_epoch", "ce_mode"});
    read(q, "enabled", c.qr.enabled, "qr");
    read(q, "momentum", c.qr.momentum, "qr");
    read(q, "weight_clamp", c.qr.weight_clamp, "qr");
    read(q, "enabled_after_epoch", c.qr.enabled_after_epoch, "qr");
    read(q, "ce_mode", c.qr.ce_mode, "qr");
  }
  if (j.contains("optimizer")) {
    const auto& o = j["optimizer"];
    reject_unknown(o, "optimizer",
                   {"lr", "betas", "eps", "weight_decay", "epochs", "warmup_epochs", "batch_size"});
    read(o, "lr", c.optimizer.lr, "optimizer");
    if (o.contains("betas")) {
      std::vector<double> betas;
      read(o, "betas", betas, "optimizer");
      require(betas.size() == 2, "optimizer.betas", "must hold two values");
      c.optimizer.beta1 = betas[0];
      c.optimizer.beta2 = betas[1];
    }
    read(o, "eps", c.optimizer.eps, "optimizer");
    read(o, "weight_decay", c.optimizer.weight_decay, "optimizer");
    read(o, "epochs", c.optimizer.epochs, "optimizer");
    read(o, "warmup_epochs", c.optimizer.warmup_epochs, "optimizer");
    read(o, "batch_size", c.optimizer.batch_size, "optimizer");
  }
  if (j.contains("pretrain")) {
    const auto& p = j["pretrain"];
    reject_unknown(p, "pretrain", {"epochs", "lr"});
    read(p, "epochs", c.pretrain.epochs, "pretrain");
    read(p, "lr", c.pretrain.lr, "pretrain");
  }
  c.data = default_data_spec();
  if (j.contains("data")) {
    const auto& d = j["data"];
    reject_unknown(d, "data", {"mean_scale", "tasks"});
    read(d, "mean_scale", c.data.mean_scale, "data");
    if (d.contains("tasks")) {
      if (!d["tasks"].is_array()) throw ConfigError("config field 'data.tasks' must be an array");
      c.data.tasks.clear();
      for (const auto& tj : d["tasks"]) {
        reject_unknown(tj, "data.tasks[]",
                       {"classes", "train_per_class", "test_per_class", "noise", "train_csv",
                        "test_csv"});
        TaskSpec t;
        read(tj, "classes", t.classes, "data.tasks[]");
        read(tj, "train_per_class", t.train_per_class, "data.tasks[]");
        read(tj, "test_per_class", t.test_per_class, "data.tasks[]");
        read(tj, "noise", t.noise, "data.tasks[]");
        read(tj, "train_csv", t.train_csv, "data.tasks[]");
        read(tj, "test_csv", t.test_csv, "data.tasks[]");
        c.data.tasks.push_back(t);
      }
    }
  }
  read(j, "strategy", c.strategy, "");
  read(j, "cluster_up_only", c.cluster_up_only, "");
  read(j, "kmeans_iters", c.kmeans_iters, "");
  read(j, "precision", c.precision, "");
  read(j, "seed", c.seed, "");
  return c;
}

Json config_to_json(const RunConfig& c) {
  Json tasks = Json::array();
  for (const auto& t : c.data.tasks) {
    Json tj = {{"classes", t.classes},
               {"train_per_class", t.train_per_class},
               {"test_per_class", t.test_per_class},
               {"noise", t.noise}};
    if (!t.train_csv.empty()) tj["train_csv"] = t.train_csv;
    if (!t.test_csv.empty()) tj["test_csv"] = t.test_csv;
    tasks.push_back(tj);
  }
  return {
      {"name", c.name},
      {"model", {{"d_in", c.model.d_in}, {"D", c.model.D}, {"H", c.model.H}, {"blocks", c.model.blocks}}},
      {"K", c.K},
      {"rank", c.rank},
      {"tau", c.tau},
      {"fading", {{"start_epoch", c.fading.start_epoch}, {"end_epoch", c.fading.end_epoch}}},
      {"qr",
       {{"enabled", c.qr.enabled},
        {"momentum", c.qr.momentum},
        {"weight_clamp", c.qr.weight_clamp},
        {"enabled_after_epoch", c.qr.enabled_after_epoch},
        {"ce_mode", c.qr.ce_mode}}},
      {"optimizer",
       {{"lr", c.optimizer.lr},
        {"betas", {c.optimizer.beta1, c.optimizer.beta2}},
        {"eps", c.optimizer.eps},
        {"weight_decay", c.optimizer.weight_decay},
        {"epochs", c.optimizer.epochs},
        {"warmup_epochs", c.optimizer.warmup_epochs},
        {"batch_size", c.optimizer.batch_size}}},
      {"pretrain", {{"epochs", c.pretrain.epochs}, {"lr", c.pretrain.lr}}},
      {"data", {{"mean_scale", c.data.mean_scale}, {"tasks", tasks}}},
      {"strategy", c.strategy},
      {"cluster_up_only", c.cluster_up_only},
      {"kmeans_iters", c.kmeans_iters},
      {"precision", c.precision},
      {"seed", c.seed},
  };
}

void resolve_config(RunConfig& c) {
  if (c.fading.end_epoch < 0) c.fading.end_epoch = c.optimizer.epochs;
  if (c.fading.start_epoch < 0) c.fading.start_epoch = c.optimizer.epochs / 2;
  if (c.data.tasks.empty()) c.data = default_data_spec();
  validate_config(c);
}

void validate_config(const RunConfig& c) {
  require(c.model.d_in >= 1, "model.d_in", "must be >= 1");
  require(c.model.D >= 1, "model.D", "must be >= 1");
  require(c.model.H >= 1, "model.H", "must be >= 1");
  require(c.model.blocks >= 0, "model.blocks", "must be >= 0");
  require(c.K >= 1, "K", "must be >= 1");
  require(c.model.H % c.K == 0, "K",
          "must divide model.H (K=" + std::to_string(c.K) + ", H=" + std::to_string(c.model.H) + ")");
  require(c.rank >= 1, "rank", "must be >= 1");
  require(c.rank <= std::min(c.model.D, c.model.H / c.K), "rank", "must be <= min(D, H/K)");
  require(c.tau > 0, "tau", "must be > 0");
  require(c.fading.start_epoch < c.fading.end_epoch, "fading",
          "start_epoch must be < end_epoch");
  require(c.qr.momentum > 0 && c.qr.momentum < 1, "qr.momentum", "must lie in (0, 1)");
  require(c.qr.weight_clamp > 0, "qr.weight_clamp", "must be > 0");
  require(c.qr.ce_mode == "batch" || c.qr.ce_mode == "ema", "qr.ce_mode",
          "must be 'batch' or 'ema'");
  require(c.optimizer.lr >= 0, "optimizer.lr", "must be >= 0");
  require(c.optimizer.beta1 >= 0 && c.optimizer.beta1 < 1 && c.optimizer.beta2 >= 0 &&
              c.optimizer.beta2 < 1,
          "optimizer.betas", "must lie in [0, 1)");
  require(c.optimizer.eps > 0, "optimizer.eps", "must be > 0");
  require(c.optimizer.weight_decay >= 0, "optimizer.weight_decay", "must be >= 0");
  require(c.optimizer.epochs >= 1, "optimizer.epochs", "must be >= 1");
  require(c.optimizer.warmup_epochs >= 0 && c.optimizer.warmup_epochs < c.optimizer.epochs,
          "optimizer.warmup_epochs", "must be >= 0 and < optimizer.epochs");
  require(c.optimizer.batch_size >= 1, "optimizer.batch_size", "must be >= 1");
  require(c.pretrain.epochs >= 1, "pretrain.epochs", "must be >= 1");
  require(c.pretrain.lr >= 0, "pretrain.lr", "must be >= 0");
  require(c.data.mean_scale > 0, "data.mean_scale", "must be > 0");
  require(!c.data.tasks.empty(), "data.tasks", "must be nonempty");
  for (const auto& t : c.data.tasks) {
    require(t.classes >= 1, "data.tasks[].classes", "must be >= 1");
    require(t.noise > 0, "data.tasks[].noise", "must be > 0");
    if (t.train_csv.empty()) {
      require(t.train_per_class >= 1, "data.tasks[].train_per_class", "must be >= 1");
      require(t.test_per_class >= 1, "data.tasks[].test_per_class", "must be >= 1");
    }
  }
  require(c.strategy == "balanced" || c.strategy == "contiguous", "strategy",
          "must be 'balanced' or 'contiguous'");
  require(c.kmeans_iters >= 1, "kmeans_iters", "must be >= 1");
  require(c.precision == "f32" || c.precision == "f64", "precision", "must be 'f32' or 'f64'");
}

RunConfig load_config(const std::filesystem::path& path) {
  Json j;
  try {
    j = Json::parse(read_file(path));
  } catch (const Json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  auto c = config_from_json(j);
  resolve_config(c);
  return c;
}

}  // namespace emtal
