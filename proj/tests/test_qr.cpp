#include <doctest.h>

#include <cmath>

#include "emtal/qr.hpp"
#include "support.hpp"

using namespace emtal;
using doctest::Approx;

TEST_CASE("cross entropy") {
  Mat<double> z(1, 3);
  z << 30, 0, 0;
  CHECK(cross_entropy(z, {0}).loss < 1e-9);
  Mat<double> u = Mat<double>::Zero(2, 5);
  CHECK(cross_entropy(u, {1, 4}).loss == Approx(std::log(5.0)));
  Mat<double> h(1, 2);
  h << std::log(3.0), 0;
  auto ce = cross_entropy(h, {0});
  CHECK(ce.loss == Approx(-std::log(0.75)));
  CHECK(ce.loss == Approx(0.287682).epsilon(1e-6));
  // (softmax - onehot) / N
  CHECK(ce.grad(0, 0) == Approx(-0.25));
  CHECK(ce.grad(0, 1) == Approx(0.25));
  CHECK_THROWS_AS(cross_entropy(h, {2}), DimensionError);
}

TEST_CASE("per-task cross entropy averages inside each task") {
  Mat<double> z = testing::random_mat<double>(5, 4, 1);
  std::vector<int> labels{0, 1, 2, 3, 0}, tasks{0, 1, 1, 0, 1};
  auto t = task_cross_entropy(z, labels, tasks, 3);
  auto ce0 = cross_entropy(Mat<double>(z({0, 3}, Eigen::all)), {0, 3});
  auto ce1 = cross_entropy(Mat<double>(z({1, 2, 4}, Eigen::all)), {1, 2, 0});
  CHECK(t.loss[0] == Approx(ce0.loss));
  CHECK(t.loss[1] == Approx(ce1.loss));
  CHECK(t.loss[2] == 0.0);
  CHECK(t.count == std::vector<int>{2, 3, 0});
  CHECK((t.grad.row(3) - ce0.grad.row(1)).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("knowledge bank EMA") {
  KnowledgeBank<double> bank(4, 0.9);
  Vec<double> z0 = testing::random_mat<double>(4, 1, 2).col(0);
  Vec<double> z = testing::random_mat<double>(4, 1, 3).col(0);
  CHECK_FALSE(bank.initialized(1));
  ema_update(bank, 1, z0);
  CHECK(bank.initialized(1));
  CHECK(bank.Z().row(1).transpose() == z0);
  for (int n = 1; n <= 100; ++n) {
    ema_update(bank, 1, z);
    const double mn = std::pow(0.9, n);
    CHECK((bank.Z().row(1).transpose() - (mn * z0 + (1 - mn) * z)).cwiseAbs().maxCoeff() < 1e-12);
  }
  // updating with the current row is a fixed point
  KnowledgeBank<double> fixed(3, 0.37);
  Vec<double> r = testing::random_mat<double>(3, 1, 4).col(0);
  fixed.update(0, r);
  fixed.update(0, Vec<double>(fixed.Z().row(0).transpose()));
  CHECK(fixed.Z().row(0).transpose() == r);
  CHECK_THROWS_AS(bank.update(4, z), DimensionError);
  CHECK_THROWS_AS(KnowledgeBank<double>(3, 1.0), ConfigError);
  CHECK_THROWS_AS(KnowledgeBank<double>(3, 0.0), ConfigError);

  // batch updates apply in order
  KnowledgeBank<double> a(2, 0.5), b(2, 0.5);
  Mat<double> zs(3, 2);
  zs << 1, 2, 3, 4, 5, 6;
  a.update_batch(zs, {0, 0, 1});
  b.update(0, zs.row(0));
  b.update(0, zs.row(1));
  b.update(1, zs.row(2));
  CHECK(a.Z() == b.Z());
  CHECK(a.Z()(0, 0) == 2.0);
}

TEST_CASE("task loss weights") {
  TaskLossTracker<double> tr(3, 0.05);
  auto w = tr.weights({0.5, 0.01, 7.0}, {2, 1, 0});
  CHECK(w[0] == Approx(2.0));
  CHECK(w[1] == Approx(20.0));
  CHECK(w[2] == 0.0);
  TaskLossTracker<double> ema(1, 0.05, true, 0.5);
  CHECK(ema.weights({1.0}, {1})[0] == Approx(1.0));
  CHECK(ema.weights({3.0}, {1})[0] == Approx(0.5));
}

TEST_CASE("QR loss") {
  SUBCASE("hand example") {
    Mat<double> z(1, 2);
    z << std::log(3.0), 0;
    KnowledgeBank<double> bank(2, 0.9);
    bank.update(0, Vec<double>::Zero(2));
    TaskLossTracker<double> tr(1, 0.05);
    const double ce = cross_entropy(z, {0}).loss;
    auto w = tr.weights({ce}, {1});
    CHECK(w[0] == Approx(3.47607).epsilon(1e-5));
    auto qr = qr_loss(z, {0}, {0}, bank, w);
    const double kl = 0.75 * std::log(1.5) + 0.25 * std::log(0.5);
    CHECK(qr.loss == Approx(kl / std::log(4.0 / 3.0)).epsilon(1e-12));
    // the rounded chain 3.47607 * 0.130812 lands at 0.45471, a hair under 0.454728
    CHECK(qr.loss == Approx(0.454728).epsilon(1e-4));
  }
  SUBCASE("zero at the teacher, rows never written ignored, absent tasks add nothing") {
    Mat<double> z = testing::random_mat<double>(4, 5, 7, 2.0);
    KnowledgeBank<double> bank(5, 0.9);
    bank.update_batch(z, {0, 1, 2, 3});
    auto qr = qr_loss(z, {0, 1, 2, 3}, {0, 0, 1, 1}, bank, std::vector<double>{3.0, 4.0});
    CHECK(std::abs(qr.loss) < 1e-9);
    KnowledgeBank<double> empty(5, 0.9);
    auto none = qr_loss(z, {0, 1, 2, 3}, {0, 0, 1, 1}, empty, std::vector<double>{3.0, 4.0});
    CHECK(none.loss == 0.0);
    CHECK(none.grad.cwiseAbs().maxCoeff() == 0.0);
    // task 1 weight 0 as if it were absent from the batch
    Mat<double> z2 = testing::random_mat<double>(4, 5, 8);
    auto only0 = qr_loss(z2, {0, 1, 2, 3}, {0, 0, 1, 1}, bank, std::vector<double>{1.0, 0.0});
    CHECK(only0.grad.row(2).cwiseAbs().maxCoeff() == 0.0);
    CHECK(only0.grad.row(3).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("non-negative on random inputs") {
    for (std::uint64_t s = 0; s < 20; ++s) {
      Mat<double> z = testing::random_mat<double>(6, 7, s, 3.0);
      KnowledgeBank<double> bank(7, 0.9);
      bank.update_batch(testing::random_mat<double>(7, 7, 100 + s, 3.0), {0, 1, 2, 3, 4, 5, 6});
      auto qr = qr_loss(z, {0, 1, 2, 3, 4, 5}, {0, 1, 0, 1, 0, 1}, bank, std::vector<double>{1.0, 2.0});
      CHECK(qr.loss >= -1e-9);
    }
  }
  SUBCASE("logit gradient matches finite differences with the bank fixed") {
    Mat<double> z = testing::random_mat<double>(3, 4, 9, 1.5);
    KnowledgeBank<double> bank(4, 0.9);
    bank.update_batch(testing::random_mat<double>(4, 4, 10), {0, 1, 2, 3});
    std::vector<int> labels{1, 3, 0}, tasks{0, 1, 1};
    std::vector<double> w{1.7, 0.4};
    auto qr = qr_loss(z, labels, tasks, bank, w);
    const double h = 1e-6;
    Mat<double> num(3, 4);
    for (Index i = 0; i < z.size(); ++i) {
      Mat<double> zp = z, zm = z;
      zp.data()[i] += h;
      zm.data()[i] -= h;
      num.data()[i] = (qr_loss(zp, labels, tasks, bank, w).loss - qr_loss(zm, labels, tasks, bank, w).loss) / (2 * h);
    }
    CHECK((num - qr.grad).norm() / num.norm() < 1e-6);
  }
  SUBCASE("perturbing the bank leaves gradients of other logits untouched") {
    // teacher detachment: the gradient set is w.r.t. logits only, and
    // changing a bank row nobody in the batch uses changes nothing.
    Mat<double> z = testing::random_mat<double>(2, 3, 11);
    KnowledgeBank<double> bank(3, 0.9);
    bank.update_batch(testing::random_mat<double>(3, 3, 12), {0, 1, 2});
    auto before = qr_loss(z, {0, 1}, {0, 0}, bank, std::vector<double>{1.0});
    bank.Z()(2, 1) += 5.0;
    auto after = qr_loss(z, {0, 1}, {0, 0}, bank, std::vector<double>{1.0});
    CHECK(after.grad == before.grad);
  }
}

TEST_CASE("total loss is a plain sum") {
  CHECK(total_loss<double>({0.3, 0.5}, 0.2) == Approx(1.0));
  CHECK(total_loss<double>({0.0, 0.0}, 0.0) == 0.0);
  CHECK(total_loss<double>({0.3, 0.5}, 0.0) == Approx(0.8));
}
