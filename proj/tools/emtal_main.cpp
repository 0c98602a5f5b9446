// emtal: pretrain -> moefy -> train -> reparam, plus verify and analyze.
//
// Exit codes: 0 ok, 1 I/O or corrupt file, 2 config, 3 numeric, 4 verify failed.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "emtal/analysis.hpp"
#include "emtal/archive.hpp"
#include "emtal/config.hpp"
#include "emtal/errors.hpp"
#include "emtal/pipeline.hpp"
#include "emtal/verify.hpp"

namespace {

using namespace emtal;

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> K, rank, fading_start, fading_end, epochs;
  std::optional<std::string> strategy;
};

RunConfig resolved(const Overrides& o) {
  RunConfig cfg;
  if (!o.config.empty()) {
    const std::string text = read_file(o.config);
    Json j;
    try {
      j = Json::parse(text);
    } catch (const Json::parse_error& e) {
      throw ConfigError(o.config + ": invalid JSON: " + e.what());
    }
    cfg = config_from_json(j);
  } else {
    cfg.data = default_data_spec();
  }
  if (o.seed) cfg.seed = *o.seed;
  if (o.K) cfg.K = *o.K;
  if (o.rank) cfg.rank = *o.rank;
  if (o.strategy) cfg.strategy = *o.strategy;
  if (o.epochs) cfg.optimizer.epochs = *o.epochs;
  if (o.fading_start) cfg.fading.start_epoch = *o.fading_start;
  if (o.fading_end) cfg.fading.end_epoch = *o.fading_end;
  resolve_config(cfg);
  return cfg;
}

std::vector<int> parse_ks(const std::string& s) {
  std::vector<int> ks;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      ks.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--ks must be a comma-separated list of integers, got '" + s + "'");
    }
  }
  if (ks.empty()) throw ConfigError("--ks is empty");
  return ks;
}

void add_overrides(CLI::App* sub, Overrides& o, bool model_flags) {
  sub->add_option("--config", o.config, "run config JSON");
  sub->add_option("--seed", o.seed, "override config seed");
  if (model_flags) {
    sub->add_option("--k", o.K, "number of experts (must divide H)");
    sub->add_option("--rank", o.rank, "LoRA rank per expert");
    sub->add_option("--strategy", o.strategy, "balanced | contiguous")
        ->check(CLI::IsMember({"balanced", "contiguous"}));
  }
  sub->add_option("--epochs", o.epochs, "override optimizer.epochs");
  sub->add_option("--fading-start", o.fading_start, "override fading.start_epoch");
  sub->add_option("--fading-end", o.fading_end, "override fading.end_epoch");
}

int run(int argc, char** argv) {
  CLI::App app{"EMTAL desk-scale pipeline"};
  app.require_subcommand(1);

  Overrides o;
  std::string in, out;
  std::string scope = "all";
  bool inject_fault = false;
  std::string ks_text = "4";
  std::optional<int> planted_K;
  int planted_D = 64, planted_H = 256;
  double planted_noise = 0.1;
  std::uint64_t probe_seed = 0;

  auto* pretrain = app.add_subcommand("pretrain", "train the dense source model");
  add_overrides(pretrain, o, true);
  pretrain->add_option("--out", out, "output archive")->required();

  auto* moefy = app.add_subcommand("moefy", "split each FFN into experts with LoRA adapters");
  add_overrides(moefy, o, true);
  moefy->add_option("--in", in, "dense archive")->required();
  moefy->add_option("--out", out, "output archive")->required();

  auto* train = app.add_subcommand("train", "multi-task fine-tuning (MoLE + QR + fading)");
  add_overrides(train, o, true);
  train->add_option("--in", in, "MoEfied (or dense, for union fine-tuning) archive")->required();
  train->add_option("--out", out, "output archive")->required();

  auto* reparam = app.add_subcommand("reparam", "fold a trained MoLE archive back into a dense one");
  reparam->add_option("--in", in, "trained archive with alpha = 0")->required();
  reparam->add_option("--out", out, "output dense archive")->required();
  reparam->add_option("--seed", probe_seed, "probe batch seed");

  auto* verify = app.add_subcommand("verify", "run the built-in invariant suites");
  verify->add_option("--scope", scope, "all | gradcheck | equivalence | ema")
      ->check(CLI::IsMember({"all", "gradcheck", "equivalence", "ema"}));
  verify->add_flag("--inject-fault", inject_fault, "test hook: corrupt results so verify must fail")
      ->group("");

  auto* analyze = app.add_subcommand("analyze", "Ky Fan ratios of balanced vs contiguous experts");
  analyze->add_option("--in", in, "dense or MoEfied archive");
  analyze->add_option("--planted", planted_K, "use the planted generator with this many bundles");
  analyze->add_option("--k", o.K, "number of experts");
  analyze->add_option("--ks", ks_text, "comma-separated k list");
  analyze->add_option("--seed", o.seed, "k-means / generator seed");
  analyze->add_option("--D", planted_D, "planted: model width");
  analyze->add_option("--H", planted_H, "planted: hidden width");
  analyze->add_option("--noise", planted_noise, "planted: column noise");
  analyze->add_option("--out", out, "output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (pretrain->parsed()) {
    const auto cfg = resolved(o);
    const auto s = run_pretrain(cfg, out);
    std::cout << "pretrain: mean test acc " << s.final_mean_test_acc << " -> " << out << "\n";
  } else if (moefy->parsed()) {
    const auto cfg = resolved(o);
    MoefyOptions mo;
    mo.K = cfg.K;
    mo.rank = cfg.rank;
    mo.tau = cfg.tau;
    mo.strategy = cfg.strategy;
    mo.up_only = cfg.cluster_up_only;
    mo.kmeans_iters = cfg.kmeans_iters;
    mo.seed = cfg.seed;
    echo_config(cfg, out);
    run_moefy(in, out, mo);
    std::cout << "moefy: K=" << mo.K << " rank=" << mo.rank << " (" << mo.strategy << ") -> " << out << "\n";
  } else if (train->parsed()) {
    const auto cfg = resolved(o);
    const auto s = run_train(cfg, in, out);
    std::cout << "train: alpha " << s.final_alpha << ", mean test acc " << s.final_mean_test_acc << " -> "
              << out << "\n";
  } else if (reparam->parsed()) {
    const auto rep = run_reparam(in, out, probe_seed);
    std::cout << "reparam: max |dlogit| " << rep.max_abs_logit_diff << ", weights_equal_base "
              << (rep.weights_equal_base ? "true" : "false") << " -> " << out << "\n";
  } else if (verify->parsed()) {
    VerifyOptions vo;
    vo.scope = scope;
    vo.inject_fault = inject_fault;
    const auto results = run_verify(vo);
    std::cout << format_results(results);
    return all_passed(results) ? 0 : 4;
  } else if (analyze->parsed()) {
    const auto ks = parse_ks(ks_text);
    const std::uint64_t seed = o.seed.value_or(0);
    if (planted_K) {
      if (!in.empty()) throw ConfigError("analyze takes either --in or --planted, not both");
      const auto ffn = planted_ffn<double>(planted_D, planted_H, *planted_K, planted_noise, seed);
      const auto cmp = compare_partitions(ffn, o.K.value_or(*planted_K), ks, seed);
      write_file_atomic(out, spectral_csv({cmp.balanced, cmp.contiguous}));
      std::cout << "analyze: balanced " << cmp.balanced.mean_ratio() << " vs contiguous "
                << cmp.contiguous.mean_ratio() << " -> " << out << "\n";
    } else {
      if (in.empty()) throw ConfigError("analyze needs --in or --planted");
      run_analyze(in, out, o.K, ks, seed);
      std::cout << "analyze: -> " << out << "\n";
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const emtal::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const emtal::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const emtal::DimensionError& e) {
    std::cerr << "dimension error: " << e.what() << "\n";
    return 2;
  } catch (const emtal::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const emtal::CorruptionError& e) {
    std::cerr << "corrupt input: " << e.what() << "\n";
    return 1;
  } catch (const emtal::FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 1;
  } catch (const emtal::IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
