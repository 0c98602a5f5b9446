#include "emtal/verify.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <limits>
#include <sstream>

#include "emtal/model.hpp"
#include "emtal/qr.hpp"

namespace emtal {

namespace {

CheckResult check(std::string suite, std::string name, double value, double tol, bool ok,
                  std::string detail = {}) {
  return {std::move(suite), std::move(name), ok, value, tol, std::move(detail)};
}

template <typename T>
std::vector<ExpertPartition> balanced_partitions(const ToyNet<T>& dense, int K, std::uint64_t seed) {
  std::vector<ExpertPartition> parts;
  for (int l = 0; l < dense.n_blocks(); ++l) {
    Rng rng = Rng(seed).substream("kmeans", static_cast<std::uint64_t>(l));
    parts.push_back(partition_balanced_kmeans(stack_ffn(dense.dense_blocks()[l].ffn), K, 30, rng));
  }
  return parts;
}

// Gives the LoRA B factors and routers non-zero values so every gradient
// path is exercised.
template <typename T>
void perturb_adapters(ToyNet<T>& net, double scale, Rng& rng) {
  for (auto& layer : net.mole_blocks()) {
    for (auto& l : layer.lora) {
      l.B_up = gaussian_matrix<T>(l.B_up.rows(), l.B_up.cols(), scale, rng);
      l.B_down = gaussian_matrix<T>(l.B_down.rows(), l.B_down.cols(), scale, rng);
    }
    layer.router.W_r = gaussian_matrix<T>(layer.router.W_r.rows(), layer.router.W_r.cols(), 1.0, rng);
  }
}

template <typename T>
double max_rel_diff(const Mat<T>& a, const Mat<T>& b) {
  const double scale = std::max<double>(b.cwiseAbs().maxCoeff(), 1e-300);
  return static_cast<double>((a - b).cwiseAbs().maxCoeff()) / scale;
}

template <typename T>
bool bit_equal(const Mat<T>& a, const Mat<T>& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(T) * static_cast<std::size_t>(a.size())) == 0;
}

template <typename T>
bool bit_equal(const Vec<T>& a, const Vec<T>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), sizeof(T) * static_cast<std::size_t>(a.size())) == 0;
}

template <typename T>
bool ffn_bit_equal(const DenseFFN<T>& a, const DenseFFN<T>& b) {
  return bit_equal(a.W_up, b.W_up) && bit_equal(a.b_up, b.b_up) && bit_equal(a.W_down, b.W_down) &&
         bit_equal(a.b_down, b.b_down);
}

template <typename T>
CheckResult init_identity(const char* label, double tol) {
  Rng rng = Rng(11).substream("verify_init");
  auto dense = make_dense_net<double>(32, 64, 256, 2, 28, rng);
  auto net = cast_net<T>(dense);
  auto mole = moefy_net(net, balanced_partitions(net, 16, 3), 4, T(5), rng);
  const Mat<T> x = gaussian_matrix<T>(100, 32, 1.0, rng);
  const double err = max_rel_diff(forward(mole, x), forward(net, x));
  return check("equivalence", std::string("init identity ") + label, err, tol, err <= tol,
               "relative max |dlogit|, 100 inputs");
}

}  // namespace

std::vector<CheckResult> verify_equivalence(bool inject_fault) {
  std::vector<CheckResult> out;
  out.push_back(init_identity<float>("f32", 1e-5));
  out.push_back(init_identity<double>("f64", 1e-12));

  // moefy -> reparameterize with zero LoRA and restored order is a pure copy
  for (const char* strategy : {"balanced", "contiguous"}) {
    Rng rng = Rng(12).substream("verify_roundtrip");
    auto dense = make_dense_net<double>(8, 16, 64, 2, 6, rng);
    std::vector<ExpertPartition> parts;
    if (std::string(strategy) == "balanced") {
      parts = balanced_partitions(dense, 8, 5);
    } else {
      parts.assign(2, partition_contiguous(64, 8));
    }
    auto mole = moefy_net(dense, parts, 2, 5.0, rng);
    if (inject_fault) mole.mole_blocks()[0].lora[0].B_up(0, 0) = 1e-3;
    const auto back = reparameterize_net(mole, true);
    bool same = true;
    for (int l = 0; l < dense.n_blocks(); ++l)
      same = same && ffn_bit_equal(back.dense_blocks()[l].ffn, dense.dense_blocks()[l].ffn);
    out.push_back(check("equivalence", std::string("round trip bit-identical (") + strategy + ")",
                        same ? 0.0 : 1.0, 0.0, same));
  }

  // Trained-looking adapters at alpha = 0: merged dense logits match.
  {
    Rng rng = Rng(13).substream("verify_reparam");
    auto dense = make_dense_net<double>(16, 32, 128, 2, 10, rng);
    auto mole = moefy_net(dense, balanced_partitions(dense, 16, 7), 4, 5.0, rng);
    perturb_adapters(mole, 0.1, rng);
    mole.set_alpha(0.0);
    const auto merged = reparameterize_net(mole, true);
    const Mat<double> x = gaussian_matrix<double>(200, 16, 1.0, rng);
    const double err = (forward(mole, x) - forward(merged, x)).cwiseAbs().maxCoeff();
    out.push_back(check("equivalence", "reparameterized logits (f64, alpha=0)", err, 1e-5, err < 1e-5,
                        "absolute max |dlogit|, 200 inputs"));
    const auto mole32 = cast_net<float>(mole);
    const auto merged32 = reparameterize_net(mole32, true);
    const Mat<float> x32 = x.cast<float>();
    const double err32 = (forward(mole32, x32) - forward(merged32, x32)).cwiseAbs().maxCoeff();
    out.push_back(check("equivalence", "reparameterized logits (f32, alpha=0)", err32, 1e-5,
                        err32 < 1e-5, "absolute max |dlogit|, 200 inputs"));
  }
  return out;
}

namespace {

struct GradProblem {
  Mat<double> x;
  std::vector<int> labels;
  std::vector<int> task_ids;
  int n_tasks = 2;
  std::vector<double> weights{1.3, 0.7};
};

double problem_loss(const ToyNet<double>& net, const GradProblem& p, const KnowledgeBank<double>* bank,
                    Mat<double>* dlogits) {
  const Mat<double> logits = forward(net, p.x);
  const auto ce = task_cross_entropy(logits, p.labels, p.task_ids, p.n_tasks);
  double qr_value = 0;
  Mat<double> grad = ce.grad;
  if (bank) {
    const auto qr = qr_loss(logits, p.labels, p.task_ids, *bank, p.weights);
    qr_value = qr.loss;
    grad += qr.grad;
  }
  if (dlogits) *dlogits = grad;
  return total_loss(ce.loss, qr_value);
}

// Relative error between analytic and central-difference gradients of every
// trainable array, measured on whole arrays.
std::vector<CheckResult> gradcheck_net(ToyNet<double>& net, const GradProblem& p,
                                       const KnowledgeBank<double>* bank, const std::string& tag,
                                       bool inject_fault) {
  constexpr double h = 1e-6;
  constexpr double tol = 1e-4;
  NetCache<double> cache;
  const Mat<double> logits = forward(net, p.x, &cache);
  Mat<double> dlogits;
  problem_loss(net, p, bank, &dlogits);
  auto grads = backward(net, cache, dlogits);
  if (inject_fault) grads["head.W"](0) += 0.05 * (grads["head.W"].norm() + 1.0);

  std::vector<CheckResult> out;
  double worst = 0;
  std::string worst_name;
  auto params = trainable_params(net);
  for (auto& prm : params) {
    const auto it = grads.find(prm.name);
    if (it == grads.end()) {
      out.push_back(check("gradcheck", tag + " " + prm.name, 1.0, tol, false, "no analytic gradient"));
      continue;
    }
    Vec<double> numeric(static_cast<Index>(prm.values.size()));
    for (std::size_t i = 0; i < prm.values.size(); ++i) {
      const double saved = prm.values[i];
      prm.values[i] = saved + h;
      const double up = problem_loss(net, p, bank, nullptr);
      prm.values[i] = saved - h;
      const double down = problem_loss(net, p, bank, nullptr);
      prm.values[i] = saved;
      numeric(static_cast<Index>(i)) = (up - down) / (2 * h);
    }
    const Vec<double>& analytic = it->second;
    const double denom = std::max({analytic.norm(), numeric.norm(), 1e-10});
    const double rel = (analytic - numeric).norm() / denom;
    if (rel >= worst) {
      worst = rel;
      worst_name = prm.name;
    }
    if (!(rel < tol))
      out.push_back(check("gradcheck", tag + " " + prm.name, rel, tol, false, "relative L2 error"));
  }
  out.push_back(check("gradcheck", tag + " all " + std::to_string(params.size()) + " trainable arrays",
                      worst, tol, worst < tol, "worst: " + worst_name));
  return out;
}

GradProblem make_problem(int n, int d_in, Rng& rng) {
  GradProblem p;
  p.x = gaussian_matrix<double>(n, d_in, 1.0, rng);
  for (int s = 0; s < n; ++s) {
    const int task = s % 2;
    p.task_ids.push_back(task);
    p.labels.push_back(task * 3 + static_cast<int>(rng.index(3)));
  }
  return p;
}

void randomize_norms(LayerNormParams<double>& ln, Rng& rng) {
  for (Index i = 0; i < ln.gamma.size(); ++i) {
    ln.gamma(i) = rng.uniform(0.5, 1.5);
    ln.beta(i) = rng.normal(0.0, 0.1);
  }
}

}  // namespace

std::vector<CheckResult> verify_gradcheck(bool inject_fault) {
  Rng rng = Rng(21).substream("verify_gradcheck");
  auto dense = make_dense_net<double>(5, 8, 16, 2, 6, rng);
  for (auto& b : dense.dense_blocks()) randomize_norms(b.ln, rng);
  randomize_norms(dense.final_ln, rng);
  const GradProblem p = make_problem(12, 5, rng);

  std::vector<CheckResult> out = gradcheck_net(dense, p, nullptr, "dense CE", false);

  auto mole = moefy_net(dense, balanced_partitions(dense, 4, 2), 1, 5.0, rng);
  perturb_adapters(mole, 0.3, rng);
  mole.set_alpha(0.6);
  KnowledgeBank<double> bank(6, 0.9);
  for (int c = 0; c < 5; ++c) bank.update(c, gaussian_matrix<double>(1, 6, 1.0, rng).row(0));  // class 5 stays empty
  for (auto& r : gradcheck_net(mole, p, &bank, "MoLE CE+QR", inject_fault)) out.push_back(std::move(r));
  return out;
}

std::vector<CheckResult> verify_ema(bool inject_fault) {
  std::vector<CheckResult> out;
  Rng rng = Rng(31).substream("verify_ema");
  const double m = 0.9;
  const Vec<double> z0 = gaussian_matrix<double>(1, 7, 1.0, rng).row(0).transpose();
  const Vec<double> z = gaussian_matrix<double>(1, 7, 1.0, rng).row(0).transpose();
  double worst = 0;
  for (int n = 1; n <= 100; ++n) {
    KnowledgeBank<double> bank(7, m);
    bank.update(2, z0);
    for (int i = 0; i < n; ++i) bank.update(2, z);
    if (inject_fault && n == 50) bank.Z()(2, 0) += 1e-6;
    const double mn = std::pow(m, n);
    const Vec<double> expect = mn * z0 + (1 - mn) * z;
    worst = std::max(worst, (bank.Z().row(2).transpose() - expect).cwiseAbs().maxCoeff());
  }
  out.push_back(check("ema", "closed form m^n z0 + (1-m^n) z, n<=100", worst, 1e-12, worst <= 1e-12));

  // Student equals teacher: the distillation term vanishes.
  const Mat<double> logits = gaussian_matrix<double>(6, 7, 2.0, rng);
  std::vector<int> labels{0, 1, 2, 3, 4, 5}, tasks{0, 0, 0, 1, 1, 1};
  KnowledgeBank<double> bank(7, m);
  bank.update_batch(logits, labels);
  const auto qr = qr_loss(logits, labels, tasks, bank, std::vector<double>{2.0, 20.0});
  out.push_back(check("ema", "QR loss is 0 when student equals teacher", std::abs(qr.loss), 0.0,
                      qr.loss == 0.0));
  const double gmax = qr.grad.cwiseAbs().maxCoeff();
  out.push_back(check("ema", "QR logit gradient vanishes at the teacher", gmax, 1e-9, gmax <= 1e-9));

  // The bank is detached: no gradient reaches it and an optimizer step
  // leaves it untouched.
  {
    Rng r2 = rng.substream("detach");
    auto dense = make_dense_net<double>(5, 8, 16, 1, 6, r2);
    auto net = moefy_net(dense, balanced_partitions(dense, 4, 1), 1, 5.0, r2);
    perturb_adapters(net, 0.3, r2);
    const GradProblem p = make_problem(8, 5, r2);
    KnowledgeBank<double> kb(6, m);
    for (int c = 0; c < 6; ++c) kb.update(c, gaussian_matrix<double>(1, 6, 1.0, r2).row(0));
    const Mat<double> before = kb.Z();
    NetCache<double> cache;
    forward(net, p.x, &cache);
    Mat<double> dlogits;
    problem_loss(net, p, &kb, &dlogits);
    const auto grads = backward(net, cache, dlogits);
    bool bank_in_grads = false;
    for (const auto& [name, g] : grads) bank_in_grads = bank_in_grads || name.rfind("qr.", 0) == 0;
    auto params = trainable_params(net);
    AdamWState<double> st;
    adamw_step(params, grads, st);
    const double drift = (kb.Z() - before).cwiseAbs().maxCoeff();
    const bool ok = !bank_in_grads && drift == 0.0;
    out.push_back(check("ema", "bank receives zero gradient", drift, 0.0, ok,
                        bank_in_grads ? "bank appears among gradients" : ""));
  }
  return out;
}

std::vector<CheckResult> verify_router() {
  std::vector<CheckResult> out;
  Rng rng = Rng(41).substream("verify_router");
  const int D = 16, K = 8;
  const Mat<float> xn = gaussian_matrix<float>(10000, D, 1.0, rng);
  Router<float> router;
  router.W_r = gaussian_matrix<float>(D, K, 2.0, rng);
  router.tau = 5.0f;
  for (float alpha : {0.0f, 0.3f, 1.0f}) {
    router.alpha = alpha;
    const Mat<float> w = router_weights(xn, router);
    const double err = (w.rowwise().sum().array() - float(K)).abs().maxCoeff();
    char name[64];
    std::snprintf(name, sizeof name, "row sums equal K (alpha=%.1f, 1e4 rows)", alpha);
    out.push_back(check("router", name, err, 1e-5, err <= 1e-5));
    if (alpha == 0.0f) {
      const bool ones = (w.array() == 1.0f).all();
      out.push_back(check("router", "alpha=0 gives all-ones weights", ones ? 0.0 : 1.0, 0.0, ones));
    }
  }
  return out;
}

namespace {

// Exhaustive minimum of the within-cluster sum of squares over balanced
// 2-way splits of H points.
double brute_force_two_way(const Eigen::MatrixXd& pts) {
  const int H = static_cast<int>(pts.cols());
  double best = std::numeric_limits<double>::infinity();
  for (unsigned mask = 0; mask < (1u << H); ++mask) {
    if (std::popcount(mask) != H / 2 || !(mask & 1u)) continue;
    std::vector<int> a(H);
    for (int j = 0; j < H; ++j) a[j] = (mask >> j) & 1u ? 0 : 1;
    best = std::min(best, partition_objective(pts, a, 2));
  }
  return best;
}

}  // namespace

std::vector<CheckResult> verify_balance() {
  std::vector<CheckResult> out;
  int pairs = 0, unbalanced = 0, nonmonotone = 0;
  for (int H : {4, 6, 8, 12, 16, 24, 32, 64}) {
    for (int K = 1; K <= H; ++K) {
      if (H % K) continue;
      ++pairs;
      Rng rng = Rng(static_cast<std::uint64_t>(H * 131 + K)).substream("verify_balance");
      const Eigen::MatrixXd pts = gaussian_matrix<double>(5, H, 1.0, rng).cast<double>();
      const auto part = partition_balanced_kmeans(pts, K, 30, rng);
      std::vector<int> count(K, 0);
      for (int a : part.assignment) ++count[a];
      if (std::any_of(count.begin(), count.end(), [&](int c) { return c != H / K; })) ++unbalanced;
      for (std::size_t i = 1; i < part.objective_history.size(); ++i)
        if (part.objective_history[i] > part.objective_history[i - 1] * (1 + 1e-12) + 1e-12) ++nonmonotone;
    }
  }
  out.push_back(check("balance", "exact balance for " + std::to_string(pairs) + " (H,K) pairs",
                      unbalanced, 0, unbalanced == 0));
  out.push_back(check("balance", "objective monotone over iterations", nonmonotone, 0, nonmonotone == 0));

  {
    Eigen::MatrixXd pts(1, 4);
    pts << 0, 1, 10, 11;
    Rng rng(1);
    const auto part = partition_balanced_kmeans(pts, 2, 30, rng);
    const double got = partition_objective(pts, part.assignment, 2);
    const double best = brute_force_two_way(pts);
    out.push_back(check("balance", "4-point 1-D instance hits the brute-force optimum",
                        std::abs(got - best), 1e-12, std::abs(got - best) <= 1e-12));
  }
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng = Rng(seed).substream("verify_h8");
    const Eigen::MatrixXd pts = gaussian_matrix<double>(3, 8, 1.0, rng).cast<double>();
    const auto part = partition_balanced_kmeans(pts, 2, 30, rng);
    const double best = brute_force_two_way(pts);
    worst = std::max(worst, partition_objective(pts, part.assignment, 2) / best - 1.0);
  }
  out.push_back(check("balance", "H=8, K=2 within 5% of brute force (10 seeds)", worst, 0.05,
                      worst <= 0.05));
  return out;
}

std::vector<CheckResult> run_verify(const VerifyOptions& opt) {
  const auto& s = opt.scope;
  if (s != "all" && s != "gradcheck" && s != "equivalence" && s != "ema")
    throw ConfigError("--scope must be one of all|gradcheck|equivalence|ema, got '" + s + "'");
  std::vector<CheckResult> out;
  auto add = [&](std::vector<CheckResult> r) {
    for (auto& c : r) out.push_back(std::move(c));
  };
  if (s == "all" || s == "equivalence") add(verify_equivalence(opt.inject_fault));
  if (s == "all" || s == "gradcheck") add(verify_gradcheck(opt.inject_fault));
  if (s == "all" || s == "ema") add(verify_ema(opt.inject_fault));
  if (s == "all") {
    add(verify_router());
    add(verify_balance());
  }
  return out;
}

bool all_passed(const std::vector<CheckResult>& results) {
  return std::all_of(results.begin(), results.end(), [](const CheckResult& r) { return r.passed; });
}

std::string format_results(const std::vector<CheckResult>& results) {
  std::ostringstream os;
  char buf[512];
  std::snprintf(buf, sizeof buf, "%-5s %-12s %-58s %12s %10s\n", "", "suite", "check", "value", "tol");
  os << buf;
  for (const auto& r : results) {
    std::snprintf(buf, sizeof buf, "%-5s %-12s %-58s %12.3e %10.1e", r.passed ? "PASS" : "FAIL",
                  r.suite.c_str(), r.name.c_str(), r.value, r.tolerance);
    os << buf;
    if (!r.detail.empty()) os << "  " << r.detail;
    os << '\n';
  }
  const auto failed = std::count_if(results.begin(), results.end(), [](const auto& r) { return !r.passed; });
  os << results.size() - failed << "/" << results.size() << " checks passed\n";
  return os.str();
}

}  // namespace emtal
