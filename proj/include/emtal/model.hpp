#pragma once

// Desk-scale multi-task classifier:
//   embed -> [LN -> FFN or MoLE -> +residual] x blocks -> LN -> head
// with hand-written backward, AdamW, and the learning-rate schedule.

#include <cmath>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "emtal/errors.hpp"
#include "emtal/linalg.hpp"
#include "emtal/moefication.hpp"
#include "emtal/mole.hpp"
#include "emtal/rng.hpp"

namespace emtal {

enum class Phase { dense, mole };

template <typename T>
struct DenseBlock {
  LayerNormParams<T> ln;
  DenseFFN<T> ffn;
};

template <typename T>
struct ToyNet {
  Mat<T> embed_W;  // d_in x D, frozen once MoEfied
  Vec<T> embed_b;
  std::variant<std::vector<DenseBlock<T>>, std::vector<MoleLayer<T>>> blocks;
  LayerNormParams<T> final_ln;
  Mat<T> head_W;  // D x N_class
  Vec<T> head_b;

  Phase phase() const { return blocks.index() == 0 ? Phase::dense : Phase::mole; }
  const auto& dense_blocks() const { return std::get<0>(blocks); }
  auto& dense_blocks() { return std::get<0>(blocks); }
  const auto& mole_blocks() const { return std::get<1>(blocks); }
  auto& mole_blocks() { return std::get<1>(blocks); }
  int n_blocks() const {
    return std::visit([](const auto& b) { return static_cast<int>(b.size()); }, blocks);
  }
  Index d_in() const { return embed_W.rows(); }
  Index D() const { return embed_W.cols(); }
  Index n_class() const { return head_W.cols(); }

  void set_alpha(T alpha) {
    if (phase() != Phase::mole) return;
    for (auto& l : mole_blocks()) l.router.alpha = alpha;
  }
};

template <typename T>
Mat<T> gaussian_matrix(Index rows, Index cols, double stddev, Rng& rng) {
  Mat<T> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.normal(0.0, stddev));
  return m;
}

template <typename T>
ToyNet<T> make_dense_net(int d_in, int D, int H, int blocks, int n_class, Rng& rng) {
  ToyNet<T> net;
  net.embed_W = gaussian_matrix<T>(d_in, D, 1.0 / std::sqrt(double(d_in)), rng);
  net.embed_b = Vec<T>::Zero(D);
  std::vector<DenseBlock<T>> dense;
  for (int l = 0; l < blocks; ++l) {
    DenseBlock<T> b;
    b.ln = LayerNormParams<T>::identity(D);
    b.ffn.W_up = gaussian_matrix<T>(D, H, 1.0 / std::sqrt(double(D)), rng);
    b.ffn.b_up = Vec<T>::Zero(H);
    b.ffn.W_down = gaussian_matrix<T>(H, D, 1.0 / std::sqrt(double(H)), rng);
    b.ffn.b_down = Vec<T>::Zero(D);
    dense.push_back(std::move(b));
  }
  net.blocks = std::move(dense);
  net.final_ln = LayerNormParams<T>::identity(D);
  net.head_W = gaussian_matrix<T>(D, n_class, 1.0 / std::sqrt(double(D)), rng);
  net.head_b = Vec<T>::Zero(n_class);
  return net;
}

/// Converts every dense block into a fresh MoLE layer using one partition
/// per block. Predictions are unchanged until the first update.
template <typename T>
ToyNet<T> moefy_net(const ToyNet<T>& dense, const std::vector<ExpertPartition>& partitions,
                    int rank, T tau, Rng& rng) {
  if (dense.phase() != Phase::dense) throw ConfigError("moefy_net: input net is not dense");
  if (static_cast<int>(partitions.size()) != dense.n_blocks())
    throw DimensionError("moefy_net: one partition per block required");
  ToyNet<T> out;
  out.embed_W = dense.embed_W;
  out.embed_b = dense.embed_b;
  out.final_ln = dense.final_ln;
  out.head_W = dense.head_W;
  out.head_b = dense.head_b;
  std::vector<MoleLayer<T>> layers;
  for (int l = 0; l < dense.n_blocks(); ++l) {
    const auto& b = dense.dense_blocks()[l];
    Rng layer_rng = rng.substream("lora", static_cast<std::uint64_t>(l));
    layers.push_back(make_mole_layer(b.ffn, b.ln, partitions[l], rank, tau, layer_rng));
  }
  out.blocks = std::move(layers);
  return out;
}

/// Replaces every MoLE layer by its reparameterized dense FFN.
template <typename T>
ToyNet<T> reparameterize_net(const ToyNet<T>& net, bool restore_order = true) {
  if (net.phase() != Phase::mole) throw ConfigError("reparameterize_net: net is not MoEfied");
  ToyNet<T> out;
  out.embed_W = net.embed_W;
  out.embed_b = net.embed_b;
  out.final_ln = net.final_ln;
  out.head_W = net.head_W;
  out.head_b = net.head_b;
  std::vector<DenseBlock<T>> dense;
  for (const auto& layer : net.mole_blocks())
    dense.push_back({layer.ln, reparameterize(layer, restore_order)});
  out.blocks = std::move(dense);
  return out;
}

template <typename U, typename T>
ToyNet<U> cast_net(const ToyNet<T>& net) {
  ToyNet<U> out;
  out.embed_W = net.embed_W.template cast<U>();
  out.embed_b = net.embed_b.template cast<U>();
  out.final_ln = net.final_ln.template cast<U>();
  out.head_W = net.head_W.template cast<U>();
  out.head_b = net.head_b.template cast<U>();
  if (net.phase() == Phase::dense) {
    std::vector<DenseBlock<U>> dense;
    for (const auto& b : net.dense_blocks()) dense.push_back({b.ln.template cast<U>(), b.ffn.template cast<U>()});
    out.blocks = std::move(dense);
  } else {
    std::vector<MoleLayer<U>> layers;
    for (const auto& l : net.mole_blocks()) {
      MoleLayer<U> m;
      for (const auto& e : l.experts)
        m.experts.push_back({e.E_up.template cast<U>(), e.E_b.template cast<U>(), e.E_down.template cast<U>()});
      for (const auto& a : l.lora)
        m.lora.push_back({a.A_up.template cast<U>(), a.B_up.template cast<U>(), a.A_down.template cast<U>(),
                          a.B_down.template cast<U>()});
      m.router = {l.router.W_r.template cast<U>(), static_cast<U>(l.router.tau), static_cast<U>(l.router.alpha)};
      m.b_down = l.b_down.template cast<U>();
      m.ln = l.ln.template cast<U>();
      m.partition = l.partition;
      layers.push_back(std::move(m));
    }
    out.blocks = std::move(layers);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Named arrays

inline std::string block_prefix(int l) { return "layer" + std::to_string(l) + "."; }

/// Calls fn(name, array, trainable) for every array of the net in a fixed
/// order. Layer norms are always frozen; the embedding is trainable only in
/// the dense phase.
template <typename Net, typename Fn>
void visit_arrays(Net& net, Fn&& fn) {
  const bool dense = net.phase() == Phase::dense;
  fn(std::string("embed.W"), net.embed_W, dense);
  fn(std::string("embed.b"), net.embed_b, dense);
  if (dense) {
    auto& blocks = net.dense_blocks();
    for (int l = 0; l < static_cast<int>(blocks.size()); ++l) {
      auto& b = blocks[l];
      const auto p = block_prefix(l);
      fn(p + "ln.gamma", b.ln.gamma, false);
      fn(p + "ln.beta", b.ln.beta, false);
      fn(p + "ffn.W_up", b.ffn.W_up, true);
      fn(p + "ffn.b_up", b.ffn.b_up, true);
      fn(p + "ffn.W_down", b.ffn.W_down, true);
      fn(p + "ffn.b_down", b.ffn.b_down, true);
    }
  } else {
    auto& layers = net.mole_blocks();
    for (int l = 0; l < static_cast<int>(layers.size()); ++l) {
      auto& m = layers[l];
      const auto p = block_prefix(l);
      fn(p + "ln.gamma", m.ln.gamma, false);
      fn(p + "ln.beta", m.ln.beta, false);
      for (int i = 0; i < static_cast<int>(m.experts.size()); ++i) {
        const auto e = p + "expert" + std::to_string(i) + ".";
        fn(e + "E_up", m.experts[i].E_up, false);
        fn(e + "E_b", m.experts[i].E_b, false);
        fn(e + "E_down", m.experts[i].E_down, false);
      }
      for (int i = 0; i < static_cast<int>(m.lora.size()); ++i) {
        const auto a = p + "lora" + std::to_string(i) + ".";
        fn(a + "A_up", m.lora[i].A_up, true);
        fn(a + "B_up", m.lora[i].B_up, true);
        fn(a + "A_down", m.lora[i].A_down, true);
        fn(a + "B_down", m.lora[i].B_down, true);
      }
      fn(p + "router.W_r", m.router.W_r, true);
      fn(p + "b_down", m.b_down, false);
    }
  }
  fn(std::string("final_ln.gamma"), net.final_ln.gamma, false);
  fn(std::string("final_ln.beta"), net.final_ln.beta, false);
  fn(std::string("head.W"), net.head_W, true);
  fn(std::string("head.b"), net.head_b, true);
}

template <typename T>
struct ParamRef {
  std::string name;
  std::span<T> values;
};

/// Flat gradients keyed by array name; row-major like the arrays.
template <typename T>
using Gradients = std::map<std::string, Vec<T>>;

template <typename T>
std::vector<ParamRef<T>> trainable_params(ToyNet<T>& net) {
  std::vector<ParamRef<T>> out;
  visit_arrays(net, [&](const std::string& name, auto& a, bool trainable) {
    if (trainable) out.push_back({name, std::span<T>(a.data(), static_cast<std::size_t>(a.size()))});
  });
  return out;
}

template <typename T>
long long trainable_count(const ToyNet<T>& net) {
  long long n = 0;
  visit_arrays(net, [&](const std::string&, const auto& a, bool trainable) {
    if (trainable) n += a.size();
  });
  return n;
}

template <typename Derived>
auto flat(const Eigen::MatrixBase<Derived>& m) {
  using T = typename Derived::Scalar;
  // Mat is row-major, so data order is the archive order.
  Mat<T> rm = m;
  return Vec<T>(Eigen::Map<const Vec<T>>(rm.data(), rm.size()));
}

// ---------------------------------------------------------------------------
// Forward / backward

template <typename T>
struct DenseCache {
  LayerNormCache<T> ln;
  Mat<T> xn, pre, hidden;
};

template <typename T>
struct NetCache {
  bool valid = false;
  Mat<T> x;
  std::vector<DenseCache<T>> dense;
  std::vector<MoleCache<T>> mole;
  LayerNormCache<T> final_ln;
  Mat<T> features;
};

template <typename T>
Mat<T> dense_block_forward(const DenseBlock<T>& b, const Mat<T>& x, DenseCache<T>* cache) {
  DenseCache<T> local;
  DenseCache<T>& c = cache ? *cache : local;
  c.xn = layer_norm_rows(x, b.ln, &c.ln);
  c.pre = (c.xn * b.ffn.W_up).rowwise() + b.ffn.b_up.transpose();
  c.hidden = gelu(c.pre);
  return (c.hidden * b.ffn.W_down).rowwise() + b.ffn.b_down.transpose();
}

/// Logits N x N_class. Fills `cache` for backward when given.
template <typename T>
Mat<T> forward(const ToyNet<T>& net, const Mat<T>& x, NetCache<T>* cache = nullptr) {
  if (x.cols() != net.d_in())
    throw DimensionError("forward: input width " + std::to_string(x.cols()) + " != d_in " +
                         std::to_string(net.d_in()));
  if (cache) {
    cache->x = x;
    cache->dense.clear();
    cache->mole.clear();
  }
  Mat<T> h = (x * net.embed_W).rowwise() + net.embed_b.transpose();
  check_finite(h, "embedding output");
  for (int l = 0; l < net.n_blocks(); ++l) {
    Mat<T> out;
    if (net.phase() == Phase::dense) {
      DenseCache<T>* c = nullptr;
      if (cache) c = &cache->dense.emplace_back();
      out = dense_block_forward(net.dense_blocks()[l], h, c);
    } else {
      MoleCache<T>* c = nullptr;
      if (cache) c = &cache->mole.emplace_back();
      out = mole_forward(h, net.mole_blocks()[l], c);
    }
    h += out;
    if (!h.allFinite()) throw NumericError("non-finite activation in block " + std::to_string(l));
  }
  LayerNormCache<T> fl;
  Mat<T> features = layer_norm_rows(h, net.final_ln, &fl);
  Mat<T> logits = (features * net.head_W).rowwise() + net.head_b.transpose();
  check_finite(logits, "logits");
  if (cache) {
    cache->final_ln = std::move(fl);
    cache->features = std::move(features);
    cache->valid = true;
  }
  return logits;
}

/// Gradients of every trainable array given dL/dlogits.
template <typename T>
Gradients<T> backward(const ToyNet<T>& net, const NetCache<T>& cache, const Mat<T>& dlogits) {
  if (!cache.valid) throw UsageError("backward called without a forward cache");
  if (dlogits.rows() != cache.features.rows() || dlogits.cols() != net.n_class())
    throw DimensionError("backward: upstream gradient shape differs from logits");
  Gradients<T> g;
  g["head.W"] = flat(cache.features.transpose() * dlogits);
  g["head.b"] = dlogits.colwise().sum().transpose();
  const Mat<T> dfeat = dlogits * net.head_W.transpose();
  Mat<T> dh = layer_norm_rows_backward(dfeat, net.final_ln.gamma, cache.final_ln);
  for (int l = net.n_blocks() - 1; l >= 0; --l) {
    const auto p = block_prefix(l);
    if (net.phase() == Phase::dense) {
      const auto& b = net.dense_blocks()[l];
      const auto& c = cache.dense[l];
      g[p + "ffn.W_down"] = flat(c.hidden.transpose() * dh);
      g[p + "ffn.b_down"] = dh.colwise().sum().transpose();
      const Mat<T> dhid = dh * b.ffn.W_down.transpose();
      const Mat<T> dpre = dhid.array() * c.pre.unaryExpr([](T v) { return gelu_grad(v); }).array();
      g[p + "ffn.W_up"] = flat(c.xn.transpose() * dpre);
      g[p + "ffn.b_up"] = dpre.colwise().sum().transpose();
      const Mat<T> dxn = dpre * b.ffn.W_up.transpose();
      dh += layer_norm_rows_backward(dxn, b.ln.gamma, c.ln);
    } else {
      const auto& layer = net.mole_blocks()[l];
      auto mg = mole_backward(layer, cache.mole[l], dh);
      for (int i = 0; i < layer.K(); ++i) {
        const auto a = p + "lora" + std::to_string(i) + ".";
        g[a + "A_up"] = flat(mg.lora[i].A_up);
        g[a + "B_up"] = flat(mg.lora[i].B_up);
        g[a + "A_down"] = flat(mg.lora[i].A_down);
        g[a + "B_down"] = flat(mg.lora[i].B_down);
      }
      g[p + "router.W_r"] = flat(mg.W_r);
      dh += mg.dx;
    }
  }
  if (net.phase() == Phase::dense) {
    g["embed.W"] = flat(cache.x.transpose() * dh);
    g["embed.b"] = dh.colwise().sum().transpose();
  }
  return g;
}

// ---------------------------------------------------------------------------
// Optimization

template <typename T>
struct AdamWState {
  T lr = T(1e-3);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  T weight_decay = T(0);
  long long step = 0;
  std::map<std::string, Vec<T>> m, v;
};

/// Decoupled weight decay, then the bias-corrected Adam update.
template <typename T>
void adamw_step(std::vector<ParamRef<T>>& params, const Gradients<T>& grads, AdamWState<T>& st) {
  ++st.step;
  const T bc1 = T(1) - std::pow(st.beta1, static_cast<T>(st.step));
  const T bc2 = T(1) - std::pow(st.beta2, static_cast<T>(st.step));
  for (auto& p : params) {
    auto it = grads.find(p.name);
    if (it == grads.end()) throw DimensionError("adamw_step: no gradient for '" + p.name + "'");
    const Vec<T>& g = it->second;
    const auto n = static_cast<Index>(p.values.size());
    if (g.size() != n) throw DimensionError("adamw_step: gradient size mismatch for '" + p.name + "'");
    auto& m = st.m[p.name];
    auto& v = st.v[p.name];
    if (m.size() != n) m = Vec<T>::Zero(n);
    if (v.size() != n) v = Vec<T>::Zero(n);
    Eigen::Map<Vec<T>> theta(p.values.data(), n);
    theta *= (T(1) - st.lr * st.weight_decay);
    m = st.beta1 * m + (T(1) - st.beta1) * g;
    v = st.beta2 * v + (T(1) - st.beta2) * g.cwiseProduct(g);
    theta.array() -= st.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + st.eps);
  }
}

/// Linear warm-up from 0 to base_lr, then half-cosine decay to 0 at
/// total_epochs. `epoch` may be fractional.
inline double cosine_lr(double epoch, double base_lr, int warmup_epochs, int total_epochs) {
  if (warmup_epochs >= total_epochs || warmup_epochs < 0)
    throw ConfigError("optimizer.warmup_epochs must be >= 0 and < optimizer.epochs");
  if (epoch < warmup_epochs) return base_lr * epoch / warmup_epochs;
  const double progress =
      std::min(1.0, (epoch - warmup_epochs) / static_cast<double>(total_epochs - warmup_epochs));
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace emtal
