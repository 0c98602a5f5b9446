#pragma once

// Splitting a dense FFN into K balanced experts of similar hidden channels,
// and putting it back together.

#include <algorithm>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "emtal/errors.hpp"
#include "emtal/linalg.hpp"
#include "emtal/rng.hpp"

namespace emtal {

/// GELU(x W_up + b_up) W_down + b_down with W_up: D x H, W_down: H x D.
template <typename T>
struct DenseFFN {
  Mat<T> W_up;
  Vec<T> b_up;
  Mat<T> W_down;
  Vec<T> b_down;

  Index D() const { return W_up.rows(); }
  Index H() const { return W_up.cols(); }

  void validate() const {
    if (b_up.size() != H() || W_down.rows() != H() || W_down.cols() != D() || b_down.size() != D())
      throw DimensionError("DenseFFN: inconsistent shapes");
    check_finite(W_up, "W_up");
    check_finite(b_up, "b_up");
    check_finite(W_down, "W_down");
    check_finite(b_down, "b_down");
  }

  template <typename U>
  DenseFFN<U> cast() const {
    return {W_up.template cast<U>(), b_up.template cast<U>(), W_down.template cast<U>(),
            b_down.template cast<U>()};
  }
};

template <typename T>
Mat<T> ffn_forward(const DenseFFN<T>& ffn, const Mat<T>& xn) {
  Mat<T> pre = (xn * ffn.W_up).rowwise() + ffn.b_up.transpose();
  Mat<T> h = gelu(pre);
  return (h * ffn.W_down).rowwise() + ffn.b_down.transpose();
}

/// W = [W_up; b_up; W_down^T], shape (2D+1) x H. Row D holds the bias.
template <typename T>
Mat<T> stack_ffn(const DenseFFN<T>& ffn) {
  ffn.validate();
  const Index D = ffn.D();
  Mat<T> w(2 * D + 1, ffn.H());
  w.topRows(D) = ffn.W_up;
  w.row(D) = ffn.b_up.transpose();
  w.bottomRows(D) = ffn.W_down.transpose();
  return w;
}

/// Inverse of stack_ffn; b_down is not part of the stack.
template <typename T>
DenseFFN<T> unstack_ffn(const Mat<T>& w, const Vec<T>& b_down) {
  if (w.rows() % 2 != 1) throw DimensionError("unstack_ffn: stacked rows must be 2D+1");
  const Index D = (w.rows() - 1) / 2;
  if (b_down.size() != D) throw DimensionError("unstack_ffn: b_down length must be D");
  DenseFFN<T> ffn;
  ffn.W_up = w.topRows(D);
  ffn.b_up = w.row(D).transpose();
  ffn.W_down = w.bottomRows(D).transpose();
  ffn.b_down = b_down;
  return ffn;
}

/// Column -> cluster assignment. permutation[j] is the original channel at
/// position j of the expert layout; cluster c occupies positions
/// [c*H/K, (c+1)*H/K).
struct ExpertPartition {
  int K = 1;
  std::vector<int> assignment;
  std::vector<int> permutation;
  // Within-cluster sum of squared distances after each k-means iteration.
  std::vector<double> objective_history;

  int H() const { return static_cast<int>(assignment.size()); }
  int cluster_size() const { return H() / K; }

  std::vector<int> inverse_permutation() const {
    std::vector<int> inv(permutation.size());
    for (std::size_t j = 0; j < permutation.size(); ++j) inv[permutation[j]] = static_cast<int>(j);
    return inv;
  }

  std::vector<int> members(int cluster) const {
    const int m = cluster_size();
    return {permutation.begin() + cluster * m, permutation.begin() + (cluster + 1) * m};
  }

  /// Throws CorruptionError if balance or bijectivity fails.
  void validate() const {
    const int h = H();
    if (K < 1 || h % K != 0) throw CorruptionError("partition: K must divide H");
    if (static_cast<int>(permutation.size()) != h)
      throw CorruptionError("partition: permutation length differs from H");
    std::vector<int> count(K, 0);
    for (int a : assignment) {
      if (a < 0 || a >= K) throw CorruptionError("partition: cluster id out of range");
      ++count[a];
    }
    for (int c : count)
      if (c != h / K) throw CorruptionError("partition: clusters are not balanced");
    std::vector<char> seen(h, 0);
    for (int j = 0; j < h; ++j) {
      const int p = permutation[j];
      if (p < 0 || p >= h || seen[p]) throw CorruptionError("partition: permutation is not a bijection");
      seen[p] = 1;
      if (assignment[p] != j / (h / K))
        throw CorruptionError("partition: permutation does not group clusters in order");
    }
  }
};

namespace detail {

inline void check_divides(int H, int K) {
  if (K < 1 || H < 1 || H % K != 0)
    throw ConfigError("K=" + std::to_string(K) + " must divide H=" + std::to_string(H));
}

/// Relabels clusters by first appearance and derives the grouped permutation.
inline void canonicalize(ExpertPartition& part) {
  std::vector<int> relabel(part.K, -1);
  int next = 0;
  for (int& a : part.assignment) {
    if (relabel[a] < 0) relabel[a] = next++;
    a = relabel[a];
  }
  part.permutation.clear();
  for (int c = 0; c < part.K; ++c)
    for (int i = 0; i < part.H(); ++i)
      if (part.assignment[i] == c) part.permutation.push_back(i);
}

inline double assignment_cost(const Eigen::MatrixXd& dist, const std::vector<int>& a) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += dist(static_cast<Index>(i), a[i]);
  return s;
}

/// Capacity-constrained greedy: points with the largest gap between their best
/// and second-best centroid pick first.
inline std::vector<int> regret_assign(const Eigen::MatrixXd& dist, int capacity) {
  const Index n = dist.rows();
  const Index k = dist.cols();
  std::vector<double> regret(n, 0.0);
  for (Index i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity(), second = best;
    for (Index c = 0; c < k; ++c) {
      const double d = dist(i, c);
      if (d < best) {
        second = best;
        best = d;
      } else if (d < second) {
        second = d;
      }
    }
    regret[i] = k > 1 ? second - best : 0.0;
  }
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return regret[a] > regret[b]; });
  std::vector<int> load(k, 0), out(n, -1);
  for (int i : order) {
    int pick = -1;
    for (Index c = 0; c < k; ++c) {
      if (load[c] >= capacity) continue;
      if (pick < 0 || dist(i, c) < dist(i, pick)) pick = static_cast<int>(c);
    }
    out[i] = pick;
    ++load[pick];
  }
  return out;
}

/// Pairwise exchanges between clusters while any swap lowers the cost.
inline void swap_improve(const Eigen::MatrixXd& dist, std::vector<int>& a) {
  const Index n = dist.rows();
  for (int pass = 0; pass < 100; ++pass) {
    bool improved = false;
    for (Index i = 0; i < n; ++i) {
      for (Index j = i + 1; j < n; ++j) {
        const int ci = a[i], cj = a[j];
        if (ci == cj) continue;
        const double gain = dist(i, ci) + dist(j, cj) - dist(i, cj) - dist(j, ci);
        if (gain > 1e-12 * (std::abs(dist(i, ci)) + std::abs(dist(j, cj)) + 1e-300)) {
          std::swap(a[i], a[j]);
          improved = true;
        }
      }
    }
    if (!improved) break;
  }
}

/// Exchange refinement on the true objective. With equal cluster sizes m the
/// objective is const - m * sum_c |c_c|^2, so swapping x_i (in A) with x_j
/// (in B) changes it by -2 d.(c_A - c_B) - 2|d|^2/m, d = x_j - x_i.
/// Returns true if any swap was applied.
inline bool exchange_refine(const Eigen::MatrixXd& pts, std::vector<int>& a, Eigen::MatrixXd& cent,
                            int capacity) {
  const Index n = pts.cols();
  const double m = capacity;
  bool any = false;
  for (int pass = 0; pass < 100; ++pass) {
    bool improved = false;
    for (Index i = 0; i < n; ++i) {
      for (Index j = i + 1; j < n; ++j) {
        const int ci = a[i], cj = a[j];
        if (ci == cj) continue;
        const Eigen::VectorXd d = pts.col(j) - pts.col(i);
        const double delta = -2.0 * d.dot(cent.col(ci) - cent.col(cj)) - 2.0 * d.squaredNorm() / m;
        const double scale = (cent.col(ci) - cent.col(cj)).squaredNorm() + d.squaredNorm();
        if (delta < -1e-12 * scale) {
          cent.col(ci) += d / m;
          cent.col(cj) -= d / m;
          std::swap(a[i], a[j]);
          improved = any = true;
        }
      }
    }
    if (!improved) break;
  }
  return any;
}

inline Eigen::MatrixXd centroids_of(const Eigen::MatrixXd& pts, const std::vector<int>& a, int K) {
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(pts.rows(), K);
  std::vector<int> count(K, 0);
  for (Index i = 0; i < pts.cols(); ++i) {
    c.col(a[i]) += pts.col(i);
    ++count[a[i]];
  }
  for (int k = 0; k < K; ++k) c.col(k) /= static_cast<double>(count[k]);
  return c;
}

inline Eigen::MatrixXd sq_distances(const Eigen::MatrixXd& pts, const Eigen::MatrixXd& cent) {
  Eigen::MatrixXd d(pts.cols(), cent.cols());
  for (Index i = 0; i < pts.cols(); ++i)
    for (Index c = 0; c < cent.cols(); ++c) d(i, c) = (pts.col(i) - cent.col(c)).squaredNorm();
  return d;
}

}  // namespace detail

/// Within-cluster sum of squared Euclidean distances to the cluster means.
template <typename Derived>
double partition_objective(const Eigen::MatrixBase<Derived>& columns,
                           const std::vector<int>& assignment, int K) {
  const Eigen::MatrixXd pts = columns.template cast<double>();
  const auto cent = detail::centroids_of(pts, assignment, K);
  double s = 0;
  for (Index i = 0; i < pts.cols(); ++i) s += (pts.col(i) - cent.col(assignment[i])).squaredNorm();
  return s;
}

/// Balanced k-means over the columns of `columns`: k-means++ seeding, then
/// alternating capacity-constrained assignment and mean updates. The
/// assignment step keeps the previous assignment unless the greedy one is
/// cheaper, then refines by pairwise swaps, so the objective never increases. A final
/// exchange pass works on the exact objective.
template <typename Derived>
ExpertPartition partition_balanced_kmeans(const Eigen::MatrixBase<Derived>& columns, int K,
                                          int max_iters, Rng& rng) {
  const int H = static_cast<int>(columns.cols());
  detail::check_divides(H, K);
  if (max_iters < 1) throw ConfigError("max_iters must be >= 1");
  if (!columns.allFinite()) throw NumericError("partition_balanced_kmeans: non-finite columns");
  const Eigen::MatrixXd pts = columns.template cast<double>();
  const int capacity = H / K;

  // k-means++ seeding
  Eigen::MatrixXd cent(pts.rows(), K);
  std::vector<char> chosen(H, 0);
  int first = static_cast<int>(rng.index(H));
  cent.col(0) = pts.col(first);
  chosen[first] = 1;
  Eigen::VectorXd nearest(H);
  for (int i = 0; i < H; ++i) nearest(i) = (pts.col(i) - cent.col(0)).squaredNorm();
  for (int k = 1; k < K; ++k) {
    double total = 0;
    for (int i = 0; i < H; ++i)
      if (!chosen[i]) total += nearest(i);
    int pick = -1;
    if (total > 0) {
      double r = rng.uniform() * total;
      for (int i = 0; i < H; ++i) {
        if (chosen[i]) continue;
        pick = i;
        r -= nearest(i);
        if (r < 0) break;
      }
    } else {
      std::vector<int> open;
      for (int i = 0; i < H; ++i)
        if (!chosen[i]) open.push_back(i);
      pick = open[rng.index(open.size())];
    }
    chosen[pick] = 1;
    cent.col(k) = pts.col(pick);
    for (int i = 0; i < H; ++i)
      nearest(i) = std::min(nearest(i), (pts.col(i) - cent.col(k)).squaredNorm());
  }

  ExpertPartition part;
  part.K = K;
  std::vector<int> current;
  for (int iter = 0; iter < max_iters; ++iter) {
    const auto dist = detail::sq_distances(pts, cent);
    auto next = detail::regret_assign(dist, capacity);
    if (!current.empty() &&
        detail::assignment_cost(dist, current) <= detail::assignment_cost(dist, next))
      next = current;
    detail::swap_improve(dist, next);
    cent = detail::centroids_of(pts, next, K);
    double obj = 0;
    for (int i = 0; i < H; ++i) obj += (pts.col(i) - cent.col(next[i])).squaredNorm();
    part.objective_history.push_back(obj);
    const bool converged = next == current;
    current = std::move(next);
    if (converged) break;
  }
  // Lloyd steps stop at assignment-stable points; exchanges on the exact
  // objective escape some of them.
  if (K > 1 && detail::exchange_refine(pts, current, cent, capacity)) {
    cent = detail::centroids_of(pts, current, K);
    double obj = 0;
    for (int i = 0; i < H; ++i) obj += (pts.col(i) - cent.col(current[i])).squaredNorm();
    part.objective_history.push_back(obj);
  }
  part.assignment = std::move(current);
  detail::canonicalize(part);
  return part;
}

/// Channels [i*H/K, (i+1)*H/K) form expert i; the permutation is the identity.
inline ExpertPartition partition_contiguous(int H, int K) {
  detail::check_divides(H, K);
  ExpertPartition part;
  part.K = K;
  part.assignment.resize(H);
  part.permutation.resize(H);
  for (int i = 0; i < H; ++i) {
    part.assignment[i] = i / (H / K);
    part.permutation[i] = i;
  }
  return part;
}

template <typename T>
struct Expert {
  Mat<T> E_up;    // D x m
  Vec<T> E_b;     // m
  Mat<T> E_down;  // m x D
};

template <typename T>
using ExpertSet = std::vector<Expert<T>>;

template <typename T>
ExpertSet<T> extract_experts(const DenseFFN<T>& ffn, const ExpertPartition& part) {
  ffn.validate();
  if (part.H() != ffn.H()) throw DimensionError("extract_experts: partition H differs from FFN H");
  part.validate();
  const int m = part.cluster_size();
  ExpertSet<T> experts(part.K);
  for (int c = 0; c < part.K; ++c) {
    auto& e = experts[c];
    e.E_up.resize(ffn.D(), m);
    e.E_b.resize(m);
    e.E_down.resize(m, ffn.D());
    for (int j = 0; j < m; ++j) {
      const int src = part.permutation[c * m + j];
      e.E_up.col(j) = ffn.W_up.col(src);
      e.E_b(j) = ffn.b_up(src);
      e.E_down.row(j) = ffn.W_down.row(src);
    }
  }
  return experts;
}

/// Concatenates experts back into a dense FFN. With restore_order the
/// channels return to their original positions; otherwise they stay in
/// expert order.
template <typename T>
DenseFFN<T> assemble_ffn(const ExpertSet<T>& experts, const Vec<T>& b_down,
                         const ExpertPartition& part, bool restore_order) {
  if (experts.empty() || static_cast<int>(experts.size()) != part.K)
    throw DimensionError("assemble_ffn: expert count differs from K");
  const Index D = experts[0].E_up.rows();
  const int m = part.cluster_size();
  DenseFFN<T> ffn;
  ffn.W_up.resize(D, part.H());
  ffn.b_up.resize(part.H());
  ffn.W_down.resize(part.H(), D);
  ffn.b_down = b_down;
  for (int c = 0; c < part.K; ++c) {
    const auto& e = experts[c];
    if (e.E_up.rows() != D || e.E_up.cols() != m || e.E_b.size() != m || e.E_down.rows() != m ||
        e.E_down.cols() != D)
      throw DimensionError("assemble_ffn: expert " + std::to_string(c) + " has the wrong shape");
    for (int j = 0; j < m; ++j) {
      const int pos = c * m + j;
      const int dst = restore_order ? part.permutation[pos] : pos;
      ffn.W_up.col(dst) = e.E_up.col(j);
      ffn.b_up(dst) = e.E_b(j);
      ffn.W_down.row(dst) = e.E_down.row(j);
    }
  }
  return ffn;
}

}  // namespace emtal
