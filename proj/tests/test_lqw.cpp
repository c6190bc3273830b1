#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "bitquant/lqw.hpp"
#include "oracles.hpp"

using namespace bitquant;

namespace {

WeightQuantParams random_params(std::mt19937_64& g, int n, int k) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_real_distribution<double> pos(0.1, 1.5);
  WeightQuantParams p;
  p.shadow.resize(n, k);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) p.shadow(i, j) = u(g);
  p.basis.resize(k);
  for (int j = 0; j < k; ++j) p.basis[j] = pos(g);
  return p;
}

}  // namespace

TEST_CASE("sign convention maps zero to +1") {
  CHECK(sign_pm1(0.0) == 1.0);
  CHECK(sign_pm1(-0.0) == 1.0);
  CHECK(sign_pm1(3.5) == 1.0);
  CHECK(sign_pm1(-1e-300) == -1.0);
}

TEST_CASE("lqw_forward combines sign patterns with the basis") {
  WeightQuantParams p;
  p.shadow.resize(2, 2);
  p.shadow << 0.3, -0.2, -0.5, 0.9;
  p.basis = Vec(2);
  p.basis << 1.0, 2.0;
  Vec wq = lqw_forward(p);
  CHECK(wq[0] == doctest::Approx(-1.0));
  CHECK(wq[1] == doctest::Approx(1.0));

  SUBCASE("outputs live on the 2^K sign-combination grid") {
    std::mt19937_64 g = oracle::rng(5);
    WeightQuantParams q = random_params(g, 40, 3);
    Vec w = lqw_forward(q);
    for (int i = 0; i < w.size(); ++i) {
      bool on_grid = false;
      for (int c = 0; c < 8 && !on_grid; ++c) {
        double lvl = 0.0;
        for (int j = 0; j < 3; ++j) lvl += ((c >> j) & 1 ? 1.0 : -1.0) * q.basis[j];
        on_grid = std::abs(w[i] - lvl) < 1e-12;
      }
      CHECK(on_grid);
    }
  }
}

TEST_CASE("lqw_backward basis gradients match finite differences") {
  std::mt19937_64 g = oracle::rng(7);
  std::normal_distribution<double> d(0.0, 1.0);
  for (int rep = 0; rep < 50; ++rep) {
    const int n = 12, k = 1 + rep % 3;
    WeightQuantParams p = random_params(g, n, k);
    Vec target(n);
    for (int i = 0; i < n; ++i) target[i] = d(g);

    // L(v) = 0.5 || sign(S) v - t ||^2 with the sign pattern unaffected by v.
    const Vec wq = lqw_forward(p);
    const LqwGrads grads = lqw_backward(wq - target, p);
    for (int j = 0; j < k; ++j) {
      const double fd = oracle::central_diff(
          [&](double vj) {
            WeightQuantParams q = p;
            q.basis[j] = vj;
            return 0.5 * (lqw_forward(q) - target).squaredNorm();
          },
          p.basis[j]);
      CHECK(grads.basis[j] == doctest::Approx(fd).epsilon(1e-4));
    }

    // The straight-through shadow gradient is grad_wq outer basis by
    // definition; check the bilinear identity.
    const Mat expect = (wq - target) * p.basis.transpose();
    CHECK((grads.shadow - expect).norm() <= 1e-12 * (1.0 + expect.norm()));
  }
}

TEST_CASE("single step with momentum disabled moves the basis by lr*gamma_v*grad") {
  WeightQuantParams p;
  p.shadow = Mat::Ones(1, 1);
  p.basis = Vec::Ones(1);
  LqwOptState st = make_opt_state(p);
  OptimConfig opt;
  opt.momentum = 0.0;
  opt.gamma_v = 1.0 / 50.0;
  LqwGrads g;
  g.shadow = Mat::Zero(1, 1);
  g.basis = Vec::Ones(1);
  lqw_update(p, g, opt, /*lr=*/0.1, st);
  CHECK(p.basis[0] == doctest::Approx(1.0 - 0.002).epsilon(1e-12));
}

TEST_CASE("shadow weights are clipped to [-1,1] after the step") {
  WeightQuantParams p;
  p.shadow = Mat::Constant(1, 1, 0.999);
  p.basis = Vec::Ones(1);
  LqwOptState st = make_opt_state(p);
  OptimConfig opt;
  opt.momentum = 0.0;
  opt.gamma_s = 1.0;
  LqwGrads g;
  g.shadow = Mat::Constant(1, 1, -5.0);  // pushes the shadow up
  g.basis = Vec::Zero(1);
  lqw_update(p, g, opt, 1.0, st);
  CHECK(p.shadow(0, 0) == 1.0);

  g.shadow = Mat::Constant(1, 1, 50.0);
  lqw_update(p, g, opt, 1.0, st);
  CHECK(p.shadow(0, 0) == -1.0);
}

TEST_CASE("non-finite gradients raise a numeric error") {
  std::mt19937_64 g = oracle::rng(9);
  WeightQuantParams p = random_params(g, 3, 2);
  LqwOptState st = make_opt_state(p);
  LqwGrads bad;
  bad.shadow = Mat::Zero(3, 2);
  bad.basis = Vec::Zero(2);
  bad.basis[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(lqw_update(p, bad, OptimConfig{}, 0.1, st), NumericError);
}

TEST_CASE("poly schedule decays to the final rate") {
  OptimConfig opt;
  opt.lr = 0.1;
  opt.lr_final = 0.0;
  opt.total_epochs = 2;
  CHECK(poly_lr(0, opt) == doctest::Approx(0.1));
  CHECK(poly_lr(1, opt) == doctest::Approx(0.025));
  CHECK(poly_lr(2, opt) == doctest::Approx(0.0));
  CHECK(poly_lr(100, opt) == doctest::Approx(0.0));
  CHECK_THROWS_AS(poly_lr(-1, opt), ParamError);

  OptimConfig def;
  def.lr = 0.05;
  def.total_epochs = 120;
  CHECK(poly_lr(0, def) == doctest::Approx(0.05));
  CHECK(poly_lr(120, def) == doctest::Approx(def.lr_final));
  for (int e = 1; e <= 120; ++e) CHECK(poly_lr(e, def) < poly_lr(e - 1, def));
}

TEST_CASE("repeated steps descend a realizable objective") {
  std::mt19937_64 g = oracle::rng(13);
  WeightQuantParams p = random_params(g, 24, 2);
  WeightQuantParams target_p = random_params(g, 24, 2);
  const Vec target = lqw_forward(target_p);
  LqwOptState st = make_opt_state(p);
  OptimConfig opt;
  opt.momentum = 0.9;
  opt.gamma_v = 1.0 / 50.0;
  opt.gamma_s = 1.0;

  const double initial = 0.5 * (lqw_forward(p) - target).squaredNorm();
  double loss = initial;
  for (int step = 0; step < 100; ++step) {
    const Vec wq = lqw_forward(p);
    lqw_update(p, lqw_backward(wq - target, p), opt, 0.05, st);
    loss = 0.5 * (lqw_forward(p) - target).squaredNorm();
  }
  CHECK(loss < 0.5 * initial);

  SUBCASE("shadow stays in range throughout") {
    CHECK(p.shadow.maxCoeff() <= 1.0);
    CHECK(p.shadow.minCoeff() >= -1.0);
  }
}

TEST_CASE("updating one filter leaves the others untouched") {
  std::mt19937_64 g = oracle::rng(15);
  std::vector<WeightQuantParams> filters{random_params(g, 8, 2), random_params(g, 8, 2)};
  filters[0].filter_id = 0;
  filters[1].filter_id = 1;
  std::vector<LqwOptState> states{make_opt_state(filters[0]), make_opt_state(filters[1])};
  const WeightQuantParams before = filters[1];

  LqwGrads grads;
  grads.shadow = Mat::Ones(8, 2);
  grads.basis = Vec::Ones(2);
  lqw_update(filters[0], grads, OptimConfig{}, 0.1, states[0]);

  CHECK((filters[1].shadow - before.shadow).norm() == 0.0);
  CHECK((filters[1].basis - before.basis).norm() == 0.0);
}
