#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <type_traits>
#include <utility>

#include "emtal/errors.hpp"

namespace emtal {

// Row-major so that a batch row is one sample and the archive layout is a
// straight copy.
template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using Index = Eigen::Index;

inline constexpr double kLayerNormEps = 1e-6;
inline constexpr double kKlEps = 1e-12;

/// x * Phi(x) with the exact Gaussian CDF.
template <typename T>
  requires std::is_floating_point_v<T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

/// d/dx [x * Phi(x)] = Phi(x) + x * phi(x)
template <typename T>
  requires std::is_floating_point_v<T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

template <typename Derived>
auto gelu(const Eigen::MatrixBase<Derived>& x) {
  using T = typename Derived::Scalar;
  return x.unaryExpr([](T v) { return gelu(v); });
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.allFinite();
}

template <typename Derived>
void check_finite(const Eigen::DenseBase<Derived>& m, const std::string& what) {
  if (!m.allFinite()) throw NumericError("non-finite values in " + what);
}

template <typename DerivedA, typename DerivedB>
void check_same_size(const Eigen::DenseBase<DerivedA>& a, const Eigen::DenseBase<DerivedB>& b,
                     const std::string& what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(what + ": shape " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
  }
}

/// Standardize one vector, then scale and shift. Population variance.
template <typename T>
Vec<T> layer_norm(const Vec<T>& x, const Vec<T>& gamma, const Vec<T>& beta,
                  T eps = T(kLayerNormEps)) {
  if (x.size() != gamma.size() || x.size() != beta.size())
    throw DimensionError("layer_norm: length mismatch");
  const T mean = x.mean();
  const Vec<T> centered = x.array() - mean;
  const T var = centered.squaredNorm() / T(x.size());
  const T inv_std = T(1) / std::sqrt(var + eps);
  return (centered.array() * inv_std * gamma.array() + beta.array()).matrix();
}

template <typename T>
struct LayerNormParams {
  Vec<T> gamma;
  Vec<T> beta;
  T eps = T(kLayerNormEps);

  static LayerNormParams identity(Index d) {
    return {Vec<T>::Ones(d), Vec<T>::Zero(d), T(kLayerNormEps)};
  }

  template <typename U>
  LayerNormParams<U> cast() const {
    return {gamma.template cast<U>(), beta.template cast<U>(), static_cast<U>(eps)};
  }
};

template <typename T>
struct LayerNormCache {
  Mat<T> xhat;
  Vec<T> inv_std;
};

/// Row-wise layer norm over a batch.
template <typename T>
Mat<T> layer_norm_rows(const Mat<T>& x, const Vec<T>& gamma, const Vec<T>& beta, T eps,
                       LayerNormCache<T>* cache = nullptr) {
  if (x.cols() != gamma.size() || x.cols() != beta.size())
    throw DimensionError("layer_norm_rows: width mismatch");
  const Vec<T> mean = x.rowwise().mean();
  Mat<T> xhat = x.colwise() - mean;
  const Vec<T> var = xhat.array().square().rowwise().mean();
  const Vec<T> inv_std = (var.array() + eps).rsqrt();
  xhat = inv_std.asDiagonal() * xhat;
  Mat<T> y = (xhat.array().rowwise() * gamma.transpose().array()).rowwise() +
             beta.transpose().array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = inv_std;
  }
  return y;
}

template <typename T>
Mat<T> layer_norm_rows(const Mat<T>& x, const LayerNormParams<T>& ln,
                       LayerNormCache<T>* cache = nullptr) {
  return layer_norm_rows(x, ln.gamma, ln.beta, ln.eps, cache);
}

template <typename T>
Mat<T> layer_norm_rows_backward(const Mat<T>& dy, const Vec<T>& gamma,
                                const LayerNormCache<T>& cache) {
  const Mat<T> dxhat = dy.array().rowwise() * gamma.transpose().array();
  const Vec<T> mean_d = dxhat.rowwise().mean();
  const Vec<T> mean_dx = (dxhat.array() * cache.xhat.array()).rowwise().mean();
  Mat<T> dx = (dxhat.colwise() - mean_d) - mean_dx.asDiagonal() * cache.xhat;
  return cache.inv_std.asDiagonal() * dx;
}

/// Row-wise softmax with max subtraction.
template <typename T>
Mat<T> softmax_rows(const Mat<T>& m) {
  Mat<T> out = m.colwise() - m.rowwise().maxCoeff();
  out = out.array().exp();
  const Vec<T> sums = out.rowwise().sum();
  return sums.cwiseInverse().asDiagonal() * out;
}

template <typename Derived>
auto softmax(const Eigen::MatrixBase<Derived>& v) {
  using T = typename Derived::Scalar;
  Vec<T> out = (v.array() - v.maxCoeff()).exp();
  return Vec<T>(out / out.sum());
}

/// sum_i p_i * ln((p_i + eps) / (q_i + eps))
template <typename DerivedP, typename DerivedQ>
typename DerivedP::Scalar kl_divergence(const Eigen::MatrixBase<DerivedP>& p,
                                        const Eigen::MatrixBase<DerivedQ>& q,
                                        typename DerivedP::Scalar eps = kKlEps) {
  if (p.size() != q.size()) throw DimensionError("kl_divergence: length mismatch");
  using T = typename DerivedP::Scalar;
  T acc = 0;
  for (Index i = 0; i < p.size(); ++i) {
    const T pi = p(i);
    acc += pi * std::log((pi + eps) / (q(i) + eps));
  }
  return acc;
}

/// Singular values, descending, by one-sided (Hestenes) Jacobi in double
/// precision. Intended for matrices with min dimension up to ~1e3.
template <typename Derived>
Eigen::VectorXd svd_values(const Eigen::MatrixBase<Derived>& m) {
  if (!m.allFinite()) throw NumericError("svd_values: non-finite input");
  Eigen::MatrixXd a = m.template cast<double>();
  if (a.rows() < a.cols()) a.transposeInPlace();
  const Index n = a.cols();
  if (n > 1024) throw DimensionError("svd_values: min dimension exceeds 1024");
  constexpr double tol = 1e-15;
  constexpr int max_sweeps = 80;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (Index p = 0; p + 1 < n; ++p) {
      for (Index q = p + 1; q < n; ++q) {
        const double alpha = a.col(p).squaredNorm();
        const double beta = a.col(q).squaredNorm();
        const double gamma = a.col(p).dot(a.col(q));
        if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t =
            std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (Index r = 0; r < a.rows(); ++r) {
          const double ap = a(r, p);
          const double aq = a(r, q);
          a(r, p) = c * ap - s * aq;
          a(r, q) = s * ap + c * aq;
        }
      }
    }
    if (!rotated) break;
  }
  Eigen::VectorXd sigma = a.colwise().norm().transpose();
  std::sort(sigma.data(), sigma.data() + sigma.size(), std::greater<>());
  return sigma;
}

}  // namespace emtal
