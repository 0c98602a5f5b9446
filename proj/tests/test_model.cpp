#include <doctest.h>

#include <cmath>

#include "emtal/analysis.hpp"
#include "emtal/checkpoint.hpp"
#include "emtal/model.hpp"
#include "emtal/trainer.hpp"
#include "support.hpp"

using namespace emtal;
using doctest::Approx;

namespace {

ToyNet<double> small_mole(std::uint64_t seed, int blocks = 2) {
  Rng rng(seed);
  auto dense = make_dense_net<double>(5, 8, 16, blocks, 6, rng);
  std::vector<ExpertPartition> parts(blocks, partition_contiguous(16, 4));
  return moefy_net(dense, parts, 1, 5.0, rng);
}

}  // namespace

TEST_CASE("zero-depth net is head(LN(embed(x)))") {
  Rng rng(1);
  auto net = make_dense_net<double>(3, 4, 8, 0, 5, rng);
  Mat<double> x = testing::random_mat<double>(2, 3, 2);
  Mat<double> h = (x * net.embed_W).rowwise() + net.embed_b.transpose();
  Mat<double> expect = (layer_norm_rows(h, net.final_ln) * net.head_W).rowwise() + net.head_b.transpose();
  CHECK((forward(net, x) - expect).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("scalar oracle on a d_in = D = 2 net") {
  ToyNet<double> net;
  net.embed_W = Mat<double>(2, 2);
  net.embed_W << 1.0, 0.5, -0.3, 2.0;
  net.embed_b = Vec<double>(2);
  net.embed_b << 0.1, -0.1;
  DenseBlock<double> b;
  b.ln = LayerNormParams<double>::identity(2);
  b.ln.gamma << 1.5, 0.5;
  b.ln.beta << 0.2, -0.4;
  b.ffn.W_up = Mat<double>(2, 3);
  b.ffn.W_up << 0.3, -0.7, 1.1, 0.9, 0.4, -0.2;
  b.ffn.b_up = Vec<double>(3);
  b.ffn.b_up << 0.0, 0.1, -0.3;
  b.ffn.W_down = Mat<double>(3, 2);
  b.ffn.W_down << 0.5, -0.5, 0.25, 1.0, -1.0, 0.75;
  b.ffn.b_down = Vec<double>(2);
  b.ffn.b_down << 0.05, 0.0;
  net.blocks = std::vector<DenseBlock<double>>{b};
  net.final_ln = LayerNormParams<double>::identity(2);
  net.head_W = Mat<double>(2, 2);
  net.head_W << 1, 2, 3, 4;
  net.head_b = Vec<double>::Zero(2);

  const double x0 = 0.7, x1 = -1.2;
  double h[2] = {x0 * 1.0 + x1 * -0.3 + 0.1, x0 * 0.5 + x1 * 2.0 - 0.1};
  auto ln = [](const double v[2], const double g[2], const double be[2], double out[2]) {
    const double mu = (v[0] + v[1]) / 2;
    const double var = ((v[0] - mu) * (v[0] - mu) + (v[1] - mu) * (v[1] - mu)) / 2;
    for (int i = 0; i < 2; ++i) out[i] = (v[i] - mu) / std::sqrt(var + 1e-6) * g[i] + be[i];
  };
  const double g1[2] = {1.5, 0.5}, b1[2] = {0.2, -0.4}, one[2] = {1, 1}, zero[2] = {0, 0};
  double xn[2];
  ln(h, g1, b1, xn);
  const double wu[2][3] = {{0.3, -0.7, 1.1}, {0.9, 0.4, -0.2}}, bu[3] = {0.0, 0.1, -0.3};
  const double wd[3][2] = {{0.5, -0.5}, {0.25, 1.0}, {-1.0, 0.75}}, bd[2] = {0.05, 0.0};
  double out[2] = {bd[0], bd[1]};
  for (int j = 0; j < 3; ++j) {
    const double pre = xn[0] * wu[0][j] + xn[1] * wu[1][j] + bu[j];
    const double act = 0.5 * pre * (1 + std::erf(pre / std::sqrt(2.0)));
    for (int d = 0; d < 2; ++d) out[d] += act * wd[j][d];
  }
  h[0] += out[0];
  h[1] += out[1];
  double f[2];
  ln(h, one, zero, f);
  Mat<double> x(1, 2);
  x << x0, x1;
  Mat<double> logits = forward(net, x);
  CHECK(logits(0, 0) == Approx(f[0] * 1 + f[1] * 3).epsilon(1e-12));
  CHECK(logits(0, 1) == Approx(f[0] * 2 + f[1] * 4).epsilon(1e-12));
}

TEST_CASE("backward") {
  auto net = small_mole(3);
  Mat<double> x = testing::random_mat<double>(4, 5, 4);
  NetCache<double> cache;
  Mat<double> logits = forward(net, x, &cache);

  SUBCASE("zero upstream gives zero gradients") {
    for (const auto& [name, g] : backward(net, cache, Mat<double>(Mat<double>::Zero(4, 6))))
      CHECK(g.cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("frozen arrays are absent; trainable arrays present") {
    auto g = backward(net, cache, Mat<double>(Mat<double>::Ones(4, 6)));
    CHECK(g.count("embed.W") == 0);
    CHECK(g.count("layer0.ln.gamma") == 0);
    CHECK(g.count("layer0.expert0.E_up") == 0);
    CHECK(g.count("layer1.router.W_r") == 1);
    for (const auto& p : trainable_params(net)) CHECK(g.count(p.name) == 1);
  }
  SUBCASE("head gradient under CE is (softmax - onehot)^T features / N") {
    std::vector<int> labels{0, 5, 2, 2};
    auto ce = cross_entropy(logits, labels);
    auto g = backward(net, cache, ce.grad);
    Mat<double> onehot = Mat<double>::Zero(4, 6);
    for (int s = 0; s < 4; ++s) onehot(s, labels[s]) = 1;
    Mat<double> expect = cache.features.transpose() * (softmax_rows(logits) - onehot) / 4.0;
    CHECK((g["head.W"] - flat(expect)).cwiseAbs().maxCoeff() < 1e-14);
  }
  SUBCASE("missing cache") {
    NetCache<double> empty;
    CHECK_THROWS_AS(backward(net, empty, Mat<double>(Mat<double>::Zero(4, 6))), UsageError);
  }
}

TEST_CASE("non-finite activations name the block") {
  auto net = small_mole(5);
  net.mole_blocks()[1].experts[0].E_down(0, 0) = std::numeric_limits<double>::infinity();
  Mat<double> x = testing::random_mat<double>(2, 5, 6);
  try {
    forward(net, x);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("block 1") != std::string::npos);
  }
}

TEST_CASE("AdamW") {
  Vec<double> theta = Vec<double>::Constant(1, 2.0);
  std::vector<ParamRef<double>> params{{"t", std::span<double>(theta.data(), 1)}};
  Gradients<double> zero{{"t", Vec<double>::Zero(1)}};
  SUBCASE("zero gradient, no decay") {
    AdamWState<double> st;
    adamw_step(params, zero, st);
    CHECK(theta(0) == 2.0);
  }
  SUBCASE("zero gradient with decay scales by 1 - lr wd") {
    AdamWState<double> st;
    st.lr = 0.1;
    st.weight_decay = 0.5;
    adamw_step(params, zero, st);
    CHECK(theta(0) == Approx(2.0 * (1 - 0.05)));
  }
  SUBCASE("first step with g = 1 moves by lr") {
    AdamWState<double> st;
    st.lr = 0.1;
    Gradients<double> g{{"t", Vec<double>::Ones(1)}};
    adamw_step(params, g, st);
    CHECK(std::abs(theta(0) - (2.0 - 0.1)) < 1e-6);
    CHECK(st.step == 1);
  }
  SUBCASE("shape mismatch") {
    AdamWState<double> st;
    Gradients<double> g{{"t", Vec<double>::Ones(2)}};
    CHECK_THROWS_AS(adamw_step(params, g, st), DimensionError);
  }
}

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(10, 1e-3, 10, 100) == Approx(1e-3));
  CHECK(cosine_lr(100, 1e-3, 10, 100) == Approx(0).scale(1));
  CHECK(cosine_lr(55, 1e-3, 10, 100) == Approx(5e-4));
  CHECK(cosine_lr(5, 1e-3, 10, 100) == Approx(5e-4));
  CHECK(cosine_lr(10 - 1e-9, 1.0, 10, 100) == Approx(cosine_lr(10 + 1e-9, 1.0, 10, 100)));
  CHECK_THROWS_AS(cosine_lr(1, 1e-3, 100, 100), ConfigError);
}

TEST_CASE("frozen arrays never move during training") {
  SyntheticSpec spec;
  spec.d_in = 5;
  spec.seed = 2;
  spec.tasks = {{3, 6, 4, 0.5}, {3, 6, 4, 1.0}};
  auto data = generate_synthetic(spec);
  auto net = small_mole(7);
  std::map<std::string, Eigen::VectorXd> before;
  visit_arrays(net, [&](const std::string& name, const auto& a, bool trainable) {
    if (!trainable) before[name] = Eigen::Map<const Eigen::VectorXd>(a.data(), a.size());
  });
  TrainSettings s;
  s.epochs = 3;
  s.warmup_epochs = 1;
  s.fading_start = 1;
  s.fading_end = 3;
  s.batch_size = 8;
  s.lr = 1e-2;
  train(net, data.train, data.test, data.labels, s);
  int checked = 0;
  visit_arrays(net, [&](const std::string& name, const auto& a, bool trainable) {
    if (trainable) return;
    ++checked;
    CHECK(std::memcmp(before[name].data(), a.data(), sizeof(double) * a.size()) == 0);
  });
  CHECK(checked > 0);
  CHECK(net.mole_blocks()[0].router.alpha == 0.0);
}

TEST_CASE("training a separable two-task problem") {
  SyntheticSpec spec;
  spec.d_in = 8;
  spec.mean_scale = 4.0;
  spec.seed = 11;
  spec.tasks = {{3, 20, 10, 0.2}, {3, 20, 10, 0.3}};
  auto data = generate_synthetic(spec);
  Rng rng(3);
  auto net = make_dense_net<float>(8, 16, 32, 1, data.labels.n_class, rng);
  TrainSettings s;
  s.epochs = 30;
  s.warmup_epochs = 3;
  s.qr_enabled = false;
  s.lr = 3e-3;
  auto summary = train(net, data.train, data.test, data.labels, s);
  CHECK(summary.final_mean_train_acc >= 0.95);
  REQUIRE(summary.history.size() == 30);
  const std::string csv = metrics_csv(summary.history, 2);
  CHECK(csv.rfind("epoch,lr,alpha,ce_t0,ce_t1,train_acc_t0,train_acc_t1,test_acc_t0,test_acc_t1,qr_loss,"
                  "mean_train_acc,mean_test_acc\n",
                  0) == 0);

  SUBCASE("same seed, same metrics; worker count does not matter") {
    Rng r2(3);
    auto again = make_dense_net<float>(8, 16, 32, 1, data.labels.n_class, r2);
    s.workers = 3;
    s.shard_rows = 8;
    Rng r3(3);
    auto third = make_dense_net<float>(8, 16, 32, 1, data.labels.n_class, r3);
    auto a = train(again, data.train, data.test, data.labels, s);
    s.workers = 1;
    auto b = train(third, data.train, data.test, data.labels, s);
    CHECK(metrics_csv(a.history, 2) == metrics_csv(b.history, 2));
  }
}

TEST_CASE("checkpoint round trip") {
  auto net = small_mole(9);
  for (auto& l : net.mole_blocks()) l.lora[1].B_up.setConstant(0.25);
  net.set_alpha(0.3);
  Archive ar = net_to_archive(net);
  KnowledgeBank<double> bank(6, 0.8);
  bank.update(2, Vec<double>::Constant(6, 1.5));
  bank_to_archive(bank, ar);
  const Archive back = decode_archive(encode_archive(ar));
  auto net2 = net_from_archive<double>(back);
  Mat<double> x = testing::random_mat<double>(3, 5, 10);
  CHECK(forward(net2, x) == forward(net, x));
  CHECK(net2.mole_blocks()[0].router.alpha == 0.3);
  auto bank2 = bank_from_archive<double>(back);
  CHECK(bank2.Z() == bank.Z());
  CHECK(bank2.initialized(2));
  CHECK_FALSE(bank2.initialized(1));
  CHECK(bank2.momentum() == 0.8);

  Archive broken = back;
  broken.meta["layers"][0].erase("permutation");
  CHECK_THROWS_AS(net_from_archive<double>(broken), CorruptionError);
}

TEST_CASE("trainable count equals the closed form") {
  auto net = small_mole(12, 3);
  auto c = count_tunables(8, 16, 4, 1, 3, 6);
  CHECK(trainable_count(net) == c.total());
}
