#include <doctest.h>

#include <cmath>

#include <Eigen/QR>
#include <Eigen/SVD>

#include "emtal/analysis.hpp"
#include "emtal/model.hpp"
#include "support.hpp"

using namespace emtal;
using doctest::Approx;

TEST_CASE("Ky Fan ratio") {
  Eigen::VectorXd u = testing::random_mat<double>(6, 1, 1).col(0), v = testing::random_mat<double>(4, 1, 2).col(0);
  CHECK(kyfan_ratio(u * v.transpose(), 1) == Approx(1.0).epsilon(1e-12));
  CHECK(kyfan_ratio(Eigen::MatrixXd::Identity(9, 9), 1) == Approx(1.0 / 3.0).epsilon(1e-12));
  Eigen::MatrixXd m = testing::random_mat<double>(16, 8, 3);
  Eigen::BDCSVD<Eigen::MatrixXd> oracle(m);
  const auto& s = oracle.singularValues();
  CHECK(kyfan_ratio(m, 4) == Approx(std::sqrt(s.head(4).squaredNorm() / s.squaredNorm())).epsilon(1e-8));
  CHECK(kyfan_ratio(m, 8) == 1.0);
  CHECK_THROWS_AS(kyfan_ratio(m, 0), ConfigError);
  CHECK_THROWS_AS(kyfan_ratio(m, 9), ConfigError);
  double prev = 0;
  for (int k = 1; k <= 8; ++k) {
    const double r = kyfan_ratio(m, k);
    CHECK(r >= prev);
    CHECK(r > 0);
    CHECK(r <= 1.0 + 1e-15);
    prev = r;
  }
  // orthogonal invariance
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(Eigen::MatrixXd(testing::random_mat<double>(16, 16, 4)));
  Eigen::MatrixXd Q = qr.householderQ();
  CHECK(kyfan_ratio(Eigen::MatrixXd(Q * m), 3) == Approx(kyfan_ratio(m, 3)).epsilon(1e-8));
}

TEST_CASE("partition comparison") {
  SUBCASE("planted structure favors clustering") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      auto ffn = planted_ffn<double>(16, 64, 8, 0.05, seed);
      auto cmp = compare_partitions(ffn, 8, {2}, seed);
      CHECK(cmp.balanced.mean_ratio() > cmp.contiguous.mean_ratio());
    }
  }
  SUBCASE("K = 1 reports are identical") {
    auto ffn = planted_ffn<double>(8, 16, 4, 0.1, 1);
    auto cmp = compare_partitions(ffn, 1, {1, 2, 3}, 1);
    for (std::size_t i = 0; i < 3; ++i) CHECK(cmp.balanced.mean_ratio(i) == cmp.contiguous.mean_ratio(i));
  }
  SUBCASE("csv layout") {
    auto ffn = planted_ffn<double>(4, 8, 2, 0.1, 1);
    auto cmp = compare_partitions(ffn, 2, {1, 2}, 1);
    const auto csv = spectral_csv({cmp.balanced, cmp.contiguous});
    CHECK(csv.rfind("layer,expert,strategy,k,ratio,singular_values\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 2 * 2 * 2);
  }
}

TEST_CASE("tunable counts") {
  auto vit = count_tunables(768, 3072, 16, 4, 12, 1000);
  CHECK(vit.lora == 1474560);
  CHECK(vit.router == 147456);
  CHECK(vit.excluding_head() == 1622016);
  CHECK(count_tunables(1, 1, 1, 1, 1, 1).per_layer == 5);
  CHECK_THROWS_AS(count_tunables(4, 8, 2, 0, 1, 1), ConfigError);

  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const int D = 2 + static_cast<int>(rng.index(10));
    const int K = 1 + static_cast<int>(rng.index(6));
    const int H = K * (1 + static_cast<int>(rng.index(6)));
    const int rank = 1 + static_cast<int>(rng.index(std::min(D, H / K)));
    const int blocks = 1 + static_cast<int>(rng.index(3));
    const int n_class = 1 + static_cast<int>(rng.index(7));
    Rng r2(trial);
    auto dense = make_dense_net<double>(3, D, H, blocks, n_class, r2);
    std::vector<ExpertPartition> parts(blocks, partition_contiguous(H, K));
    auto net = moefy_net(dense, parts, rank, 5.0, r2);
    CHECK(trainable_count(net) == count_tunables(D, H, K, rank, blocks, n_class).total());
  }
}
