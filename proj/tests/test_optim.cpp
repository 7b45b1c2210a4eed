#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "quack/errors.hpp"
#include "quack/linalg.hpp"
#include "quack/optim.hpp"

using namespace quack;

namespace {

// U V^T from a dense SVD.
quack::Tensor polar(const quack::Tensor& g) {
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(oracle::to_eigen(g), Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::MatrixXd p = svd.matrixU() * svd.matrixV().transpose();
  quack::Tensor out({g.rows(), g.cols()});
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t j = 0; j < g.cols(); ++j) out(i, j) = p(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  return out;
}

}  // namespace

TEST_CASE("warmup schedule ramps linearly and then holds") {
  const Schedule s{3e-3, 50};
  CHECK(s.lr_at(0) == doctest::Approx(3e-3 / 50));
  CHECK(s.lr_at(24) == doctest::Approx(3e-3 * 25 / 50));
  CHECK(s.lr_at(49) == 3e-3);
  CHECK(s.lr_at(5000) == 3e-3);
  CHECK(Schedule{1e-2, 0}.lr_at(0) == 1e-2);
}

TEST_CASE("Newton-Schulz output has unit singular values and equals the polar factor") {
  std::mt19937_64 rng(31);
  const std::pair<std::size_t, std::size_t> shapes[] = {{16, 64}, {64, 16}, {64, 256}, {32, 8}, {48, 20}};
  for (auto [r, c] : shapes) {
    const Tensor g = Tensor::randn({r, c}, rng, 0.01);
    const Tensor o = newton_schulz(g);
    const auto sv = oracle::singular_values(o);
    for (Eigen::Index i = 0; i < sv.size(); ++i) CHECK(std::abs(sv(i) - 1.0) <= 1e-6);
    CHECK(oracle::max_abs_diff(o, polar(g)) <= 1e-6);
  }
}

TEST_CASE("Newton-Schulz maps zero to zero and ignores overall scale") {
  const Tensor z({8, 4});
  CHECK(newton_schulz(z) == z);
  std::mt19937_64 rng(32);
  const Tensor g = Tensor::randn({12, 5}, rng);
  CHECK(oracle::max_abs_diff(newton_schulz(g), newton_schulz(scaled(g, 1e4))) <= 1e-10);
  CHECK_THROWS_AS(newton_schulz(Tensor({4})), DimensionError);
}

TEST_CASE("Muon step follows Nesterov momentum and the polar factor") {
  std::mt19937_64 rng(33);
  const MuonConfig cfg;
  Tensor param = Tensor::randn({24, 10}, rng);
  Tensor expect = param;
  Tensor buf({24, 10});
  ParamState state;
  for (int step = 0; step < 4; ++step) {
    const Tensor g = Tensor::randn({24, 10}, rng);
    const double lr = 0.01 * (step + 1);
    const double norm = muon_step(param, g, state, lr, cfg);
    Tensor dir({24, 10});
    for (std::size_t i = 0; i < g.size(); ++i) {
      buf[i] = 0.95 * buf[i] + g[i];
      dir[i] = g[i] + 0.95 * buf[i];
    }
    const Tensor o = polar(dir);
    for (std::size_t i = 0; i < o.size(); ++i) expect[i] -= lr * o[i];
    CHECK(norm == doctest::Approx(std::sqrt(10.0)).epsilon(1e-6));
  }
  CHECK(oracle::max_abs_diff(param, expect) <= 1e-7);
  CHECK(state.steps == 4);
}

TEST_CASE("Muon rejects non-matrix parameters and shape mismatches") {
  ParamState s;
  Tensor v({5});
  CHECK_THROWS_AS(muon_step(v, v, s, 0.1), ConfigError);
  Tensor m({3, 2});
  CHECK_THROWS_AS(muon_step(m, Tensor({2, 3}), s, 0.1), DimensionError);
}

TEST_CASE("Adam step matches the bias-corrected update written out by hand") {
  std::mt19937_64 rng(34);
  Tensor p = Tensor::randn({7}, rng);
  std::vector<double> ref(p.storage()), m(7, 0.0), v(7, 0.0);
  ParamState s;
  const AdamConfig cfg;
  for (int t = 1; t <= 5; ++t) {
    const Tensor g = Tensor::randn({7}, rng);
    adam_step(p, g, s, 1e-2, cfg);
    for (std::size_t i = 0; i < 7; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.95 * v[i] + 0.05 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.95, t));
      ref[i] -= 1e-2 * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  for (std::size_t i = 0; i < 7; ++i) CHECK(p[i] == doctest::Approx(ref[i]).epsilon(1e-13));
}

TEST_CASE("first Adam step moves every coordinate by about lr") {
  Tensor p = Tensor::filled({4}, 0.0);
  ParamState s;
  adam_step(p, Tensor({4}, {1.0, -2.0, 3.0, -0.5}), s, 0.1);
  CHECK(p[0] == doctest::Approx(-0.1));
  CHECK(p[1] == doctest::Approx(0.1));
}

TEST_CASE("optimizer validates learning-rate and gradient maps before touching weights") {
  ModelConfig cfg;
  ModelParams params = init_params(cfg, 1);
  const Tensor before = params.embed;
  Optimizer opt;
  GradMap grads;
  LrMap lrs = uniform_lrs(params, 1e-3);
  for_each_param(params, [&](const ParamInfo& info, const Tensor& t) { grads[info.name] = Tensor(t.shape()); });
  lrs.erase("layers.0.attn.wq.1");
  CHECK_THROWS_AS(opt.apply_step(params, grads, lrs), ConfigError);
  CHECK(params.embed == before);
  CHECK(opt.step_count() == 0);

  lrs = uniform_lrs(params, 1e-3);
  grads.erase("final_norm");
  CHECK_THROWS_AS(opt.apply_step(params, grads, lrs), ConfigError);
}

TEST_CASE("optimizer routes matrices in blocks to Muon and the rest to Adam") {
  ModelConfig cfg;
  ModelParams params = init_params(cfg, 2);
  std::mt19937_64 rng(35);
  GradMap grads;
  for_each_param(params, [&](const ParamInfo& info, const Tensor& t) { grads[info.name] = Tensor::randn(t.shape(), rng); });
  Optimizer opt;
  const StepReport r = opt.apply_step(params, grads, uniform_lrs(params, 1e-3));
  CHECK(opt.step_count() == 1);
  // Orthogonalized 64 x 16 update: sqrt(16) singular values of 1.
  CHECK(r.update_norm.at("layers.0.attn.wq.0") == doctest::Approx(4.0).epsilon(1e-6));
  REQUIRE(opt.state("embed") != nullptr);
  CHECK_FALSE(opt.state("embed")->v.empty());
  CHECK(opt.state("layers.0.mlp.up")->v.empty());
}
