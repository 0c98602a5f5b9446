#pragma once

// Mixture of Low-rank Experts layer: frozen experts from a clustered FFN,
// a per-expert LoRA delta on both projections, and a soft router whose
// influence fades to nothing so the layer folds back into a dense FFN.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "emtal/errors.hpp"
#include "emtal/linalg.hpp"
#include "emtal/moefication.hpp"
#include "emtal/rng.hpp"

namespace emtal {

inline constexpr double kLoraInitStd = 0.02;

template <typename T>
struct LoraExpert {
  Mat<T> A_up;    // D x r
  Mat<T> B_up;    // r x m
  Mat<T> A_down;  // m x r
  Mat<T> B_down;  // r x D
};

template <typename T>
struct Router {
  Mat<T> W_r;  // D x K
  T tau = T(5);
  T alpha = T(1);
};

template <typename T>
struct MoleLayer {
  ExpertSet<T> experts;  // frozen
  std::vector<LoraExpert<T>> lora;
  Router<T> router;
  Vec<T> b_down;         // frozen
  LayerNormParams<T> ln; // frozen
  ExpertPartition partition;

  int K() const { return static_cast<int>(experts.size()); }
  Index D() const { return b_down.size(); }
  Index expert_width() const { return experts.empty() ? 0 : experts[0].E_up.cols(); }
  Index H() const { return K() * expert_width(); }
  Index rank() const { return lora.empty() ? 0 : lora[0].A_up.cols(); }

  void validate() const {
    const Index D = this->D(), m = expert_width(), r = rank();
    if (K() < 1 || static_cast<int>(lora.size()) != K())
      throw DimensionError("MoleLayer: expert and LoRA counts differ");
    if (r < 1 || r > std::min(D, m)) throw DimensionError("MoleLayer: rank must lie in [1, min(D, H/K)]");
    for (int i = 0; i < K(); ++i) {
      const auto& e = experts[i];
      const auto& l = lora[i];
      const bool ok = e.E_up.rows() == D && e.E_up.cols() == m && e.E_b.size() == m &&
                      e.E_down.rows() == m && e.E_down.cols() == D && l.A_up.rows() == D &&
                      l.A_up.cols() == r && l.B_up.rows() == r && l.B_up.cols() == m &&
                      l.A_down.rows() == m && l.A_down.cols() == r && l.B_down.rows() == r &&
                      l.B_down.cols() == D;
      if (!ok) throw DimensionError("MoleLayer: expert " + std::to_string(i) + " has inconsistent shapes");
    }
    if (router.W_r.rows() != D || router.W_r.cols() != K())
      throw DimensionError("MoleLayer: router must be D x K");
    if (!(router.tau > 0)) throw ConfigError("router tau must be > 0");
    if (!(router.alpha >= 0 && router.alpha <= 1)) throw ConfigError("router alpha must lie in [0, 1]");
    if (ln.gamma.size() != D || ln.beta.size() != D) throw DimensionError("MoleLayer: LN width must be D");
  }
};

/// Fresh layer: A ~ N(0, 0.02^2), B = 0, W_r = 0, alpha = 1. Behaves exactly
/// like `ffn` until the first update.
template <typename T>
MoleLayer<T> make_mole_layer(const DenseFFN<T>& ffn, const LayerNormParams<T>& ln,
                             const ExpertPartition& part, int rank, T tau, Rng& rng) {
  MoleLayer<T> layer;
  layer.experts = extract_experts(ffn, part);
  layer.partition = part;
  layer.b_down = ffn.b_down;
  layer.ln = ln;
  layer.router.W_r = Mat<T>::Zero(ffn.D(), part.K);
  layer.router.tau = tau;
  layer.router.alpha = T(1);
  const Index D = ffn.D(), m = part.cluster_size();
  auto gaussian = [&rng](Index r, Index c) {
    Mat<T> a(r, c);
    for (Index i = 0; i < a.size(); ++i) a.data()[i] = static_cast<T>(rng.normal(0.0, kLoraInitStd));
    return a;
  };
  for (int i = 0; i < part.K; ++i) {
    LoraExpert<T> l;
    l.A_up = gaussian(D, rank);
    l.B_up = Mat<T>::Zero(rank, m);
    l.A_down = gaussian(m, rank);
    l.B_down = Mat<T>::Zero(rank, D);
    layer.lora.push_back(std::move(l));
  }
  layer.validate();
  return layer;
}

/// 1 before `start`, linear down to 0 at `end`, 0 afterwards.
inline double fading_alpha(double epoch, int start_epoch, int end_epoch) {
  if (start_epoch >= end_epoch) throw ConfigError("fading: start_epoch must be < end_epoch");
  if (epoch < start_epoch) return 1.0;
  if (epoch >= end_epoch) return 0.0;
  return (end_epoch - epoch) / static_cast<double>(end_epoch - start_epoch);
}

template <typename T>
struct RouterCache {
  Mat<T> probs;  // softmax(xn W_r / tau), N x K
};

/// omega = alpha * K * softmax(xn W_r / tau) + (1 - alpha), where xn is the
/// layer-normalized input. Every row sums to K.
template <typename T>
Mat<T> router_weights(const Mat<T>& xn, const Router<T>& router, RouterCache<T>* cache = nullptr) {
  if (!(router.tau > 0)) throw ConfigError("router tau must be > 0");
  if (xn.cols() != router.W_r.rows()) throw DimensionError("router_weights: input width must be D");
  const T K = static_cast<T>(router.W_r.cols());
  Mat<T> probs = softmax_rows<T>((xn * router.W_r) / router.tau);
  Mat<T> omega = ((router.alpha * K) * probs).array() + (T(1) - router.alpha);
  if (cache) cache->probs = std::move(probs);
  return omega;
}

/// (E_up + A_up B_up, E_down + A_down B_down) for expert i.
template <typename T>
std::pair<Mat<T>, Mat<T>> effective_expert(int i, const ExpertSet<T>& experts,
                                           const std::vector<LoraExpert<T>>& lora) {
  const auto& e = experts.at(i);
  const auto& l = lora.at(i);
  if (l.A_up.cols() != l.B_up.rows() || l.A_down.cols() != l.B_down.rows())
    throw DimensionError("effective_expert: LoRA rank mismatch");
  check_same_size(e.E_up, l.A_up * l.B_up, "effective_expert up");
  check_same_size(e.E_down, l.A_down * l.B_down, "effective_expert down");
  return {e.E_up + l.A_up * l.B_up, e.E_down + l.A_down * l.B_down};
}

template <typename T>
struct MoleCache {
  LayerNormCache<T> ln;
  Mat<T> xn;
  RouterCache<T> router;
  Mat<T> omega;
  std::vector<Mat<T>> up_eff, down_eff;
  std::vector<Mat<T>> pre;  // xn E_up' + E_b
  std::vector<Mat<T>> act;  // omega_i * pre
  std::vector<Mat<T>> hidden;
};

/// Decomposed FFN on the (pre-LN) block input x:
///   h_i = GELU(omega_i * (LN(x) E_up_i' + E_b_i)),  out = sum_i h_i E_down_i' + b_down
template <typename T>
Mat<T> mole_forward(const Mat<T>& x, const MoleLayer<T>& layer, MoleCache<T>* cache = nullptr) {
  if (x.cols() != layer.D()) throw DimensionError("mole_forward: input width must be D");
  MoleCache<T> local;
  MoleCache<T>& c = cache ? *cache : local;
  c.xn = layer_norm_rows(x, layer.ln, &c.ln);
  c.omega = router_weights(c.xn, layer.router, &c.router);
  const int K = layer.K();
  c.up_eff.resize(K);
  c.down_eff.resize(K);
  c.pre.resize(K);
  c.act.resize(K);
  c.hidden.resize(K);
  Mat<T> out = Mat<T>::Zero(x.rows(), layer.D());
  for (int i = 0; i < K; ++i) {
    std::tie(c.up_eff[i], c.down_eff[i]) = effective_expert(i, layer.experts, layer.lora);
    c.pre[i] = (c.xn * c.up_eff[i]).rowwise() + layer.experts[i].E_b.transpose();
    c.act[i] = c.omega.col(i).asDiagonal() * c.pre[i];
    c.hidden[i] = gelu(c.act[i]);
    out.noalias() += c.hidden[i] * c.down_eff[i];
  }
  out.rowwise() += layer.b_down.transpose();
  return out;
}

template <typename T>
struct LoraGrad {
  Mat<T> A_up, B_up, A_down, B_down;
};

template <typename T>
struct MoleGrads {
  std::vector<LoraGrad<T>> lora;
  Mat<T> W_r;
  Mat<T> dx;  // w.r.t. the layer input through the FFN path only
};

template <typename T>
MoleGrads<T> mole_backward(const MoleLayer<T>& layer, const MoleCache<T>& c, const Mat<T>& dout) {
  if (dout.rows() != c.xn.rows() || dout.cols() != layer.D())
    throw DimensionError("mole_backward: upstream gradient shape differs from forward output");
  const int K = layer.K();
  const T tau = layer.router.tau;
  MoleGrads<T> g;
  g.lora.resize(K);
  Mat<T> dxn = Mat<T>::Zero(c.xn.rows(), c.xn.cols());
  Mat<T> domega(c.xn.rows(), K);
  for (int i = 0; i < K; ++i) {
    const auto& l = layer.lora[i];
    const Mat<T> d_down = c.hidden[i].transpose() * dout;
    const Mat<T> dh = dout * c.down_eff[i].transpose();
    const Mat<T> da = dh.array() * c.act[i].unaryExpr([](T v) { return gelu_grad(v); }).array();
    domega.col(i) = (da.array() * c.pre[i].array()).rowwise().sum();
    const Mat<T> dpre = c.omega.col(i).asDiagonal() * da;
    const Mat<T> d_up = c.xn.transpose() * dpre;
    dxn.noalias() += dpre * c.up_eff[i].transpose();
    auto& gl = g.lora[i];
    gl.A_up = d_up * l.B_up.transpose();
    gl.B_up = l.A_up.transpose() * d_up;
    gl.A_down = d_down * l.B_down.transpose();
    gl.B_down = l.A_down.transpose() * d_down;
  }
  // omega = alpha * K * p + (1 - alpha)
  const Mat<T> dp = (layer.router.alpha * static_cast<T>(K)) * domega;
  const Vec<T> inner = (c.router.probs.array() * dp.array()).rowwise().sum();
  const Mat<T> ds = c.router.probs.array() * (dp.colwise() - inner).array();
  g.W_r = (c.xn.transpose() * ds) / tau;
  dxn.noalias() += (ds * layer.router.W_r.transpose()) / tau;
  g.dx = layer_norm_rows_backward(dxn, layer.ln.gamma, c.ln);
  return g;
}

/// Folds LoRA deltas into the experts and concatenates them into a dense
/// FFN. The router is dropped, which is exact once alpha = 0.
template <typename T>
DenseFFN<T> reparameterize(const MoleLayer<T>& layer, bool restore_order) {
  layer.validate();
  ExpertSet<T> merged(layer.K());
  for (int i = 0; i < layer.K(); ++i) {
    auto [up, down] = effective_expert(i, layer.experts, layer.lora);
    merged[i] = {std::move(up), layer.experts[i].E_b, std::move(down)};
  }
  return assemble_ffn(merged, layer.b_down, layer.partition, restore_order);
}

/// 2*K*rank*(D + H/K) LoRA scalars plus D*K router scalars.
inline long long mole_tunable_count(long long D, long long H, long long K, long long rank) {
  return 2 * K * rank * (D + H / K) + D * K;
}

}  // namespace emtal
