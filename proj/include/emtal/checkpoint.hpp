#pragma once

// ToyNet and knowledge bank <-> tensor archive, using the canonical array
// names from visit_arrays (layer{l}.expert{i}.E_up, layer{l}.lora{i}.A_up,
// layer{l}.router.W_r, qr.Z, ...).

#include <string>
#include <vector>

#include "emtal/archive.hpp"
#include "emtal/model.hpp"
#include "emtal/qr.hpp"

namespace emtal {

Json partition_to_json(const ExpertPartition& part);
/// Throws CorruptionError when fields are missing or the partition is invalid.
ExpertPartition partition_from_json(const Json& j, int expected_H);

namespace detail {

inline int meta_int(const Json& meta, const char* key) {
  if (!meta.contains(key) || !meta[key].is_number_integer())
    throw CorruptionError(std::string("archive meta is missing integer '") + key + "'");
  return meta[key].get<int>();
}

inline double meta_number(const Json& meta, const char* key) {
  if (!meta.contains(key) || !meta[key].is_number())
    throw CorruptionError(std::string("archive meta is missing number '") + key + "'");
  return meta[key].get<double>();
}

template <typename A>
void load_array(const Archive& ar, const std::string& name, A& dst) {
  const Tensor& t = ar.at(name);
  using T = typename A::Scalar;
  if constexpr (A::ColsAtCompileTime == 1) {
    if (t.shape.size() != 1 || t.shape[0] != dst.size())
      throw CorruptionError("tensor '" + name + "' has an unexpected shape");
    dst = to_vector<T>(t);
  } else {
    if (t.shape.size() != 2 || t.shape[0] != dst.rows() || t.shape[1] != dst.cols())
      throw CorruptionError("tensor '" + name + "' has an unexpected shape");
    dst = to_matrix<T>(t);
  }
}

}  // namespace detail

template <typename T>
Archive net_to_archive(const ToyNet<T>& net, DType dtype = dtype_of<T>()) {
  Archive ar;
  visit_arrays(net, [&](const std::string& name, const auto& a, bool) { ar.add(name, to_tensor(a, dtype)); });
  Json& meta = ar.meta;
  meta["phase"] = net.phase() == Phase::dense ? "dense" : "mole";
  meta["d_in"] = net.d_in();
  meta["D"] = net.D();
  meta["blocks"] = net.n_blocks();
  meta["n_class"] = net.n_class();
  if (net.phase() == Phase::dense) {
    meta["H"] = net.n_blocks() > 0 ? net.dense_blocks()[0].ffn.H() : 0;
  } else {
    const auto& layers = net.mole_blocks();
    meta["H"] = layers.empty() ? 0 : layers[0].H();
    meta["K"] = layers.empty() ? 1 : layers[0].K();
    meta["rank"] = layers.empty() ? 1 : layers[0].rank();
    meta["tau"] = layers.empty() ? 5.0 : static_cast<double>(layers[0].router.tau);
    meta["alpha"] = layers.empty() ? 0.0 : static_cast<double>(layers[0].router.alpha);
    Json parts = Json::array();
    for (const auto& l : layers) parts.push_back(partition_to_json(l.partition));
    meta["layers"] = parts;
  }
  return ar;
}

template <typename T>
ToyNet<T> net_from_archive(const Archive& ar) {
  const Json& meta = ar.meta;
  if (!meta.contains("phase") || !meta["phase"].is_string())
    throw CorruptionError("archive meta is missing 'phase'");
  const auto phase = meta["phase"].get<std::string>();
  const int d_in = detail::meta_int(meta, "d_in");
  const int D = detail::meta_int(meta, "D");
  const int H = detail::meta_int(meta, "H");
  const int blocks = detail::meta_int(meta, "blocks");
  const int n_class = detail::meta_int(meta, "n_class");

  ToyNet<T> net;
  net.embed_W.resize(d_in, D);
  net.embed_b.resize(D);
  net.final_ln = LayerNormParams<T>::identity(D);
  net.head_W.resize(D, n_class);
  net.head_b.resize(n_class);
  if (phase == "dense") {
    std::vector<DenseBlock<T>> dense(blocks);
    for (auto& b : dense) {
      b.ln = LayerNormParams<T>::identity(D);
      b.ffn.W_up.resize(D, H);
      b.ffn.b_up.resize(H);
      b.ffn.W_down.resize(H, D);
      b.ffn.b_down.resize(D);
    }
    net.blocks = std::move(dense);
  } else if (phase == "mole") {
    const int K = detail::meta_int(meta, "K");
    const int rank = detail::meta_int(meta, "rank");
    const double tau = detail::meta_number(meta, "tau");
    const double alpha = detail::meta_number(meta, "alpha");
    if (!meta.contains("layers") || !meta["layers"].is_array() ||
        static_cast<int>(meta["layers"].size()) != blocks)
      throw CorruptionError("archive meta is missing per-layer partitions");
    if (K < 1 || H % K != 0) throw CorruptionError("archive meta: K must divide H");
    const int m = H / K;
    std::vector<MoleLayer<T>> layers(blocks);
    for (int l = 0; l < blocks; ++l) {
      auto& layer = layers[l];
      layer.partition = partition_from_json(meta["layers"][l], H);
      if (layer.partition.K != K) throw CorruptionError("archive meta: partition K differs from K");
      layer.ln = LayerNormParams<T>::identity(D);
      layer.experts.resize(K);
      layer.lora.resize(K);
      for (int i = 0; i < K; ++i) {
        layer.experts[i] = {Mat<T>(D, m), Vec<T>(m), Mat<T>(m, D)};
        layer.lora[i] = {Mat<T>(D, rank), Mat<T>(rank, m), Mat<T>(m, rank), Mat<T>(rank, D)};
      }
      layer.router.W_r.resize(D, K);
      layer.router.tau = static_cast<T>(tau);
      layer.router.alpha = static_cast<T>(alpha);
      layer.b_down.resize(D);
    }
    net.blocks = std::move(layers);
  } else {
    throw CorruptionError("archive meta: unknown phase '" + phase + "'");
  }
  visit_arrays(net, [&](const std::string& name, auto& a, bool) { detail::load_array(ar, name, a); });
  if (net.phase() == Phase::mole)
    for (const auto& l : net.mole_blocks()) l.validate();
  return net;
}

template <typename T>
void bank_to_archive(const KnowledgeBank<T>& bank, Archive& ar, DType dtype = dtype_of<T>()) {
  ar.add("qr.Z", to_tensor(bank.Z(), dtype));
  Vec<double> flags(bank.n_class());
  for (int c = 0; c < bank.n_class(); ++c) flags(c) = bank.initialized(c) ? 1.0 : 0.0;
  ar.add("qr.initialized", to_tensor(flags, DType::f64));
  ar.meta["qr_momentum"] = static_cast<double>(bank.momentum());
}

template <typename T>
KnowledgeBank<T> bank_from_archive(const Archive& ar) {
  const Mat<T> z = to_matrix<T>(ar.at("qr.Z"));
  const Vec<double> flags = to_vector<double>(ar.at("qr.initialized"));
  if (z.rows() != z.cols() || flags.size() != z.rows())
    throw CorruptionError("knowledge bank tensors have inconsistent shapes");
  KnowledgeBank<T> bank(static_cast<int>(z.rows()),
                        static_cast<T>(detail::meta_number(ar.meta, "qr_momentum")));
  bank.Z() = z;
  for (int c = 0; c < bank.n_class(); ++c) bank.set_initialized(c, flags(c) != 0.0);
  return bank;
}

}  // namespace emtal
