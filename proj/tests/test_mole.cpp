#include <doctest.h>

#include <cmath>

#include "emtal/analysis.hpp"
#include "emtal/mole.hpp"
#include "support.hpp"

using namespace emtal;
using doctest::Approx;

namespace {

template <typename T>
MoleLayer<T> random_layer(int D, int H, int K, int rank, std::uint64_t seed, bool train_like) {
  Rng rng(seed);
  DenseFFN<T> f;
  f.W_up = gaussian_matrix<T>(D, H, 1.0 / std::sqrt(D), rng);
  f.b_up = gaussian_matrix<T>(H, 1, 0.1, rng).col(0);
  f.W_down = gaussian_matrix<T>(H, D, 1.0 / std::sqrt(H), rng);
  f.b_down = gaussian_matrix<T>(D, 1, 0.1, rng).col(0);
  auto ln = LayerNormParams<T>::identity(D);
  auto part = partition_balanced_kmeans(stack_ffn(f), K, 10, rng);
  auto layer = make_mole_layer(f, ln, part, rank, T(5), rng);
  if (train_like) {
    for (auto& l : layer.lora) {
      l.B_up = gaussian_matrix<T>(l.B_up.rows(), l.B_up.cols(), 0.3, rng);
      l.B_down = gaussian_matrix<T>(l.B_down.rows(), l.B_down.cols(), 0.3, rng);
    }
    layer.router.W_r = gaussian_matrix<T>(D, K, 1.0, rng);
  }
  return layer;
}

double gelu_s(double x) { return 0.5 * x * (1 + std::erf(x / std::sqrt(2.0))); }

}  // namespace

TEST_CASE("router weights") {
  Router<double> r;
  r.W_r = Mat<double>::Zero(3, 4);
  Mat<double> x = testing::random_mat<double>(10, 3, 1);
  for (double a : {0.0, 0.4, 1.0}) {
    r.alpha = a;
    CHECK((router_weights(x, r).array() - 1.0).abs().maxCoeff() < 1e-15);
  }
  r.W_r = testing::random_mat<double>(3, 4, 2, 3.0);
  r.alpha = 0;
  CHECK((router_weights(x, r).array() == 1.0).all());
  for (double a : {0.3, 1.0}) {
    r.alpha = a;
    Mat<double> w = router_weights(x, r);
    CHECK((w.rowwise().sum().array() - 4.0).abs().maxCoeff() < 1e-12);
    CHECK((w.array() >= 0).all());
  }
  // K = 2, logits [ln 3, 0]: tau = 1, W_r picks them out of a unit input
  Router<double> two;
  two.W_r = Mat<double>(1, 2);
  two.W_r << std::log(3.0), 0.0;
  two.tau = 1.0;
  Mat<double> one = Mat<double>::Ones(1, 1);
  Mat<double> w = router_weights(one, two);
  CHECK(w(0, 0) == Approx(1.5));
  CHECK(w(0, 1) == Approx(0.5));
  two.tau = 0;
  CHECK_THROWS_AS(router_weights(one, two), ConfigError);
}

TEST_CASE("fading schedule") {
  CHECK(fading_alpha(10, 50, 100) == 1.0);
  CHECK(fading_alpha(50, 50, 100) == 1.0);
  CHECK(fading_alpha(75, 50, 100) == 0.5);
  CHECK(fading_alpha(100, 50, 100) == 0.0);
  CHECK(fading_alpha(130, 50, 100) == 0.0);
  CHECK_THROWS_AS(fading_alpha(1, 5, 5), ConfigError);
}

TEST_CASE("effective expert") {
  auto layer = random_layer<double>(4, 8, 2, 2, 3, false);
  auto [up, down] = effective_expert(0, layer.experts, layer.lora);
  CHECK(up == layer.experts[0].E_up);
  CHECK(down == layer.experts[0].E_down);
  CHECK(up.rows() == 4);
  CHECK(up.cols() == 4);
  // full-rank factors built to hit a chosen delta
  Mat<double> M = testing::random_mat<double>(4, 4, 9);
  layer.lora[1].A_up = Mat<double>::Identity(4, 4);
  layer.lora[1].B_up = M;
  auto [up1, down1] = effective_expert(1, layer.experts, layer.lora);
  CHECK((up1 - (layer.experts[1].E_up + M)).cwiseAbs().maxCoeff() < 1e-15);
  layer.lora[1].B_up = Mat<double>::Zero(3, 4);
  CHECK_THROWS_AS(effective_expert(1, layer.experts, layer.lora), DimensionError);
}

TEST_CASE("fresh layer equals the dense FFN") {
  auto l64 = random_layer<double>(16, 64, 8, 2, 4, false);
  auto dense64 = assemble_ffn(l64.experts, l64.b_down, l64.partition, true);
  Mat<double> x = testing::random_mat<double>(50, 16, 5);
  Mat<double> xn = layer_norm_rows(x, l64.ln);
  Mat<double> ref = ffn_forward(dense64, xn);
  CHECK((mole_forward(x, l64) - ref).cwiseAbs().maxCoeff() / ref.cwiseAbs().maxCoeff() < 1e-12);

  auto l32 = random_layer<float>(16, 64, 8, 2, 4, false);
  auto dense32 = assemble_ffn(l32.experts, l32.b_down, l32.partition, true);
  Mat<float> x32 = x.cast<float>();
  Mat<float> ref32 = ffn_forward(dense32, layer_norm_rows(x32, l32.ln));
  CHECK((mole_forward(x32, l32) - ref32).cwiseAbs().maxCoeff() / ref32.cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("K = 1 ignores the router") {
  auto layer = random_layer<double>(6, 12, 1, 2, 6, true);
  Mat<double> x = testing::random_mat<double>(7, 6, 7);
  Mat<double> a = mole_forward(x, layer);
  layer.router.W_r *= -5.0;
  CHECK((mole_forward(x, layer) - a).cwiseAbs().maxCoeff() < 1e-14);
  auto merged = reparameterize(layer, true);
  CHECK((ffn_forward(merged, layer_norm_rows(x, layer.ln)) - a).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("scalar oracle, D = H = K = 2, rank 1") {
  MoleLayer<double> L;
  L.ln = LayerNormParams<double>::identity(2);
  L.partition = partition_contiguous(2, 2);
  L.b_down = Vec<double>(2);
  L.b_down << 0.1, -0.2;
  L.experts.resize(2);
  L.lora.resize(2);
  const double eu[2][2] = {{0.5, -0.3}, {0.2, 0.8}};  // [expert][d]
  const double eb[2] = {0.05, -0.1};
  const double ed[2][2] = {{0.7, 0.1}, {-0.4, 0.6}};  // [expert][d]
  const double au[2][2] = {{0.3, 0.2}, {-0.1, 0.4}}, bu[2] = {0.5, -0.6};
  const double ad[2] = {0.2, -0.3}, bd[2][2] = {{0.1, 0.9}, {0.3, -0.2}};
  for (int i = 0; i < 2; ++i) {
    L.experts[i].E_up = Mat<double>(2, 1);
    L.experts[i].E_up << eu[i][0], eu[i][1];
    L.experts[i].E_b = Vec<double>::Constant(1, eb[i]);
    L.experts[i].E_down = Mat<double>(1, 2);
    L.experts[i].E_down << ed[i][0], ed[i][1];
    L.lora[i].A_up = Mat<double>(2, 1);
    L.lora[i].A_up << au[i][0], au[i][1];
    L.lora[i].B_up = Mat<double>::Constant(1, 1, bu[i]);
    L.lora[i].A_down = Mat<double>::Constant(1, 1, ad[i]);
    L.lora[i].B_down = Mat<double>(1, 2);
    L.lora[i].B_down << bd[i][0], bd[i][1];
  }
  L.router.W_r = Mat<double>(2, 2);
  L.router.W_r << 1.0, -2.0, 0.5, 3.0;
  L.router.tau = 2.0;
  L.router.alpha = 0.7;

  Mat<double> x(1, 2);
  x << 0.9, -1.4;
  // independent evaluation
  const double mu = (0.9 - 1.4) / 2, var = ((0.9 - mu) * (0.9 - mu) + (-1.4 - mu) * (-1.4 - mu)) / 2;
  const double xn[2] = {(0.9 - mu) / std::sqrt(var + 1e-6), (-1.4 - mu) / std::sqrt(var + 1e-6)};
  double s[2];
  for (int k = 0; k < 2; ++k) s[k] = (xn[0] * L.router.W_r(0, k) + xn[1] * L.router.W_r(1, k)) / 2.0;
  const double z = std::exp(s[0]) + std::exp(s[1]);
  double out[2] = {0.1, -0.2};
  for (int i = 0; i < 2; ++i) {
    const double omega = 0.7 * 2 * std::exp(s[i]) / z + 0.3;
    const double up0 = eu[i][0] + au[i][0] * bu[i], up1 = eu[i][1] + au[i][1] * bu[i];
    const double h = gelu_s(omega * (xn[0] * up0 + xn[1] * up1 + eb[i]));
    for (int d = 0; d < 2; ++d) out[d] += h * (ed[i][d] + ad[i] * bd[i][d]);
  }
  Mat<double> got = mole_forward(x, L);
  CHECK(got(0, 0) == Approx(out[0]).epsilon(1e-12));
  CHECK(got(0, 1) == Approx(out[1]).epsilon(1e-12));
}

TEST_CASE("mole_backward") {
  auto layer = random_layer<double>(8, 16, 4, 1, 11, true);
  layer.router.alpha = 0.6;
  Mat<double> x = testing::random_mat<double>(5, 8, 12);
  Mat<double> w = testing::random_mat<double>(5, 8, 13);
  auto loss = [&](const MoleLayer<double>& l) { return (mole_forward(x, l).array() * w.array()).sum(); };
  MoleCache<double> cache;
  mole_forward(x, layer, &cache);
  auto g = mole_backward(layer, cache, w);

  SUBCASE("finite differences, step 1e-5") {
    const double h = 1e-5;
    auto check_array = [&](Mat<double>& p, const Mat<double>& analytic) {
      Mat<double> numeric(p.rows(), p.cols());
      for (Index i = 0; i < p.size(); ++i) {
        const double keep = p.data()[i];
        p.data()[i] = keep + h;
        const double up = loss(layer);
        p.data()[i] = keep - h;
        const double down = loss(layer);
        p.data()[i] = keep;
        numeric.data()[i] = (up - down) / (2 * h);
      }
      CHECK((numeric - analytic).norm() / std::max(numeric.norm(), 1e-12) < 1e-4);
    };
    for (int i = 0; i < 4; ++i) {
      check_array(layer.lora[i].A_up, g.lora[i].A_up);
      check_array(layer.lora[i].B_up, g.lora[i].B_up);
      check_array(layer.lora[i].A_down, g.lora[i].A_down);
      check_array(layer.lora[i].B_down, g.lora[i].B_down);
    }
    check_array(layer.router.W_r, g.W_r);
    check_array(x, g.dx);
  }
  SUBCASE("zero upstream") {
    auto z = mole_backward(layer, cache, Mat<double>(Mat<double>::Zero(5, 8)));
    CHECK(z.W_r.cwiseAbs().maxCoeff() == 0.0);
    CHECK(z.dx.cwiseAbs().maxCoeff() == 0.0);
    for (const auto& l : z.lora) CHECK(l.A_up.cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("router gradient vanishes at alpha = 0") {
    layer.router.alpha = 0;
    MoleCache<double> c0;
    mole_forward(x, layer, &c0);
    CHECK(mole_backward(layer, c0, w).W_r.cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("reparameterize") {
  SUBCASE("zero LoRA round trip is bit-identical") {
    auto layer = random_layer<double>(8, 32, 4, 2, 21, false);
    auto base = assemble_ffn(layer.experts, layer.b_down, layer.partition, true);
    auto merged = reparameterize(layer, true);
    CHECK(merged.W_up == base.W_up);
    CHECK(merged.W_down == base.W_down);
    CHECK(merged.b_up == base.b_up);
  }
  SUBCASE("trained LoRA at alpha = 0 matches the MoLE forward") {
    auto layer = random_layer<double>(8, 32, 4, 2, 22, true);
    layer.router.alpha = 0;
    Mat<double> x = testing::random_mat<double>(100, 8, 23);
    auto merged = reparameterize(layer, true);
    Mat<double> diff = ffn_forward(merged, layer_norm_rows(x, layer.ln)) - mole_forward(x, layer);
    CHECK(diff.cwiseAbs().maxCoeff() < 1e-12);

    auto l32 = random_layer<float>(8, 32, 4, 2, 22, true);
    l32.router.alpha = 0;
    Mat<float> x32 = x.cast<float>();
    auto m32 = reparameterize(l32, true);
    CHECK((ffn_forward(m32, layer_norm_rows(x32, l32.ln)) - mole_forward(x32, l32)).cwiseAbs().maxCoeff() <
          1e-6f);
  }
  SUBCASE("idempotent after zeroing LoRA") {
    auto layer = random_layer<double>(8, 32, 4, 2, 24, true);
    auto first = reparameterize(layer, true);
    auto parts = extract_experts(first, layer.partition);
    for (int i = 0; i < layer.K(); ++i) {
      layer.experts[i] = parts[i];
      layer.lora[i].B_up.setZero();
      layer.lora[i].B_down.setZero();
    }
    auto second = reparameterize(layer, true);
    CHECK(second.W_up == first.W_up);
    CHECK(second.W_down == first.W_down);
  }
}

TEST_CASE("initial values") {
  auto layer = random_layer<double>(8, 32, 4, 3, 31, false);
  CHECK(layer.router.W_r.isZero(0));
  CHECK(layer.router.tau == 5.0);
  for (const auto& l : layer.lora) {
    CHECK(l.B_up.isZero(0));
    CHECK(l.B_down.isZero(0));
    CHECK(l.A_up.rows() == 8);
    CHECK(l.A_up.cols() == 3);
    CHECK(l.A_down.rows() == 8);
    CHECK(l.B_down.cols() == 8);
  }
  // rank must be <= min(D, H/K)
  Rng rng(1);
  DenseFFN<double> f = assemble_ffn(layer.experts, layer.b_down, layer.partition, true);
  CHECK_THROWS(make_mole_layer(f, layer.ln, layer.partition, 9, 5.0, rng));
  CHECK_THROWS(make_mole_layer(f, layer.ln, layer.partition, 0, 5.0, rng));
}
