#pragma once

// Low-rank diagnostics for expert partitions and tunable-parameter accounting.

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "emtal/errors.hpp"
#include "emtal/linalg.hpp"
#include "emtal/moefication.hpp"
#include "emtal/mole.hpp"
#include "emtal/rng.hpp"

namespace emtal {

/// sqrt(sum_{i<k} s_i^2) / sqrt(sum_i s_i^2): share of spectral energy in
/// the top k singular values. A zero matrix reports 1.
inline double kyfan_ratio_from_values(const Eigen::VectorXd& sigma, int k) {
  if (k < 1 || k > sigma.size())
    throw ConfigError("k=" + std::to_string(k) + " must lie in [1, " + std::to_string(sigma.size()) + "]");
  const double total = sigma.squaredNorm();
  if (total == 0.0) return 1.0;
  return std::sqrt(sigma.head(k).squaredNorm() / total);
}

template <typename Derived>
double kyfan_ratio(const Eigen::MatrixBase<Derived>& m, int k) {
  return kyfan_ratio_from_values(svd_values(m), k);
}

struct ExpertSpectrum {
  int layer = 0;
  int expert = 0;
  Eigen::VectorXd singular_values;
  std::vector<double> ratios;  // one per requested k
};

struct SpectralReport {
  std::string strategy;
  std::vector<int> ks;
  std::vector<ExpertSpectrum> experts;

  /// Mean ratio over experts for ks[idx].
  double mean_ratio(std::size_t idx = 0) const {
    double s = 0;
    for (const auto& e : experts) s += e.ratios.at(idx);
    return experts.empty() ? 0.0 : s / static_cast<double>(experts.size());
  }
};

/// Spectra of the E_up blocks (or, with `stacked`, of the full
/// [E_up; E_b; E_down^T] blocks) of one partition.
template <typename T>
SpectralReport spectral_report(const DenseFFN<T>& ffn, const ExpertPartition& part,
                               const std::vector<int>& ks, const std::string& strategy, int layer = 0,
                               bool stacked = false) {
  SpectralReport rep;
  rep.strategy = strategy;
  rep.ks = ks;
  const auto experts = extract_experts(ffn, part);
  for (int i = 0; i < static_cast<int>(experts.size()); ++i) {
    ExpertSpectrum es;
    es.layer = layer;
    es.expert = i;
    if (stacked) {
      DenseFFN<T> sub{experts[i].E_up, experts[i].E_b, experts[i].E_down, ffn.b_down};
      es.singular_values = svd_values(stack_ffn(sub));
    } else {
      es.singular_values = svd_values(experts[i].E_up);
    }
    for (int k : ks) es.ratios.push_back(kyfan_ratio_from_values(es.singular_values, k));
    rep.experts.push_back(std::move(es));
  }
  return rep;
}

struct PartitionComparison {
  SpectralReport balanced;
  SpectralReport contiguous;
};

/// Balanced k-means experts vs contiguous-split experts on the same FFN.
template <typename T>
PartitionComparison compare_partitions(const DenseFFN<T>& ffn, int K, const std::vector<int>& ks,
                                       std::uint64_t seed, int kmeans_iters = 30, int layer = 0,
                                       bool up_only = false, bool stacked = false) {
  Rng rng = Rng(seed).substream("kmeans", static_cast<std::uint64_t>(layer));
  const Mat<T> stackm = stack_ffn(ffn);
  const auto balanced =
      up_only ? partition_balanced_kmeans(stackm.topRows(ffn.D()), K, kmeans_iters, rng)
              : partition_balanced_kmeans(stackm, K, kmeans_iters, rng);
  const auto contiguous = partition_contiguous(static_cast<int>(ffn.H()), K);
  return {spectral_report(ffn, balanced, ks, "balanced", layer, stacked),
          spectral_report(ffn, contiguous, ks, "contiguous", layer, stacked)};
}

/// FFN whose stacked columns form K bundles of H/K near-duplicates
/// (base + noise), randomly shuffled across channels.
template <typename T>
DenseFFN<T> planted_ffn(int D, int H, int K, double noise, std::uint64_t seed) {
  if (K < 1 || H % K != 0) throw ConfigError("planted_ffn: K must divide H");
  Rng rng(seed);
  const int rows = 2 * D + 1;
  Mat<T> base(rows, K);
  for (Index i = 0; i < base.size(); ++i) base.data()[i] = static_cast<T>(rng.normal());
  std::vector<int> order(H);
  for (int i = 0; i < H; ++i) order[i] = i;
  rng.shuffle(order);
  Mat<T> w(rows, H);
  for (int j = 0; j < H; ++j) {
    const int bundle = order[j] / (H / K);
    for (int r = 0; r < rows; ++r) w(r, j) = base(r, bundle) + static_cast<T>(noise * rng.normal());
  }
  Vec<T> b_down(D);
  for (Index i = 0; i < D; ++i) b_down(i) = static_cast<T>(rng.normal());
  return unstack_ffn<T>(w, b_down);
}

struct TunableCount {
  long long per_layer = 0;
  long long lora = 0;    // all layers
  long long router = 0;  // all layers
  long long head = 0;
  long long excluding_head() const { return lora + router; }
  long long total() const { return lora + router + head; }
};

/// Closed form: 2*K*rank*(D + H/K) + D*K per MoLE layer, plus the head.
inline TunableCount count_tunables(long long D, long long H, long long K, long long rank,
                                   long long layers, long long n_class) {
  if (K < 1 || H % K != 0) throw ConfigError("K must divide H");
  if (rank < 1) throw ConfigError("rank must be >= 1");
  TunableCount c;
  c.per_layer = mole_tunable_count(D, H, K, rank);
  c.lora = layers * 2 * K * rank * (D + H / K);
  c.router = layers * D * K;
  c.head = D * n_class + n_class;
  return c;
}

struct ArrayShape {
  std::string name;
  long long rows = 0;
  long long cols = 0;
};

/// Shapes of every trainable array a MoEfied net allocates, without
/// allocating them.
inline std::vector<ArrayShape> trainable_shapes(long long D, long long H, long long K, long long rank,
                                                long long layers, long long n_class) {
  std::vector<ArrayShape> out;
  const long long m = H / K;
  for (long long l = 0; l < layers; ++l) {
    const auto p = "layer" + std::to_string(l) + ".";
    for (long long i = 0; i < K; ++i) {
      const auto a = p + "lora" + std::to_string(i) + ".";
      out.push_back({a + "A_up", D, rank});
      out.push_back({a + "B_up", rank, m});
      out.push_back({a + "A_down", m, rank});
      out.push_back({a + "B_down", rank, D});
    }
    out.push_back({p + "router.W_r", D, K});
  }
  out.push_back({"head.W", D, n_class});
  out.push_back({"head.b", n_class, 1});
  return out;
}

/// CSV: layer,expert,strategy,k,ratio,singular_values (semicolon-joined).
inline std::string spectral_csv(const std::vector<SpectralReport>& reports) {
  std::ostringstream os;
  os.precision(10);
  os << "layer,expert,strategy,k,ratio,singular_values\n";
  for (const auto& rep : reports) {
    for (const auto& e : rep.experts) {
      std::ostringstream sv;
      sv.precision(10);
      for (Index i = 0; i < e.singular_values.size(); ++i) sv << (i ? ";" : "") << e.singular_values(i);
      for (std::size_t j = 0; j < rep.ks.size(); ++j)
        os << e.layer << ',' << e.expert << ',' << rep.strategy << ',' << rep.ks[j] << ','
           << e.ratios[j] << ',' << sv.str() << '\n';
    }
  }
  return os.str();
}

}  // namespace emtal
