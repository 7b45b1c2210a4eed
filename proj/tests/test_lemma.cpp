#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "oracles.hpp"
#include "quack/errors.hpp"
#include "quack/lemma.hpp"

using namespace quack;

namespace {

Tensor randn(std::size_t r, std::size_t c, std::mt19937_64& rng, double s = 1.0) {
  return Tensor::randn({r, c}, rng, s);
}

Tensor plus(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] += b[i];
  return out;
}

Tensor times(const Tensor& a, double s) {
  Tensor out = a;
  for (double& v : out.data()) v *= s;
  return out;
}

// sigma_max of (Wq + dWq) R (Wk + dWk)^T - Wq R Wk^T, scaled by 1/sqrt(d_head).
double oracle_worst_case(const Tensor& wq, const Tensor& wk, const Tensor& dwq, const Tensor& dwk,
                         const Tensor& rotation, std::size_t d_head) {
  using oracle::triple_loop_matmul;
  const Tensor before = triple_loop_matmul(triple_loop_matmul(wq, rotation), oracle::naive_transpose(wk));
  const Tensor after =
      triple_loop_matmul(triple_loop_matmul(plus(wq, dwq), rotation), oracle::naive_transpose(plus(wk, dwk)));
  return oracle::sigma_max(plus(after, times(before, -1.0))) / std::sqrt(static_cast<double>(d_head));
}

double unit_gaussian(std::vector<double>& v, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  double s = 0.0;
  for (double& x : v) {
    x = n(rng);
    s += x * x;
  }
  s = std::sqrt(s);
  for (double& x : v) x /= s;
  return s;
}

}  // namespace

TEST_CASE("derive_seed is deterministic and spreads indices") {
  CHECK(derive_seed(1, 0) == derive_seed(1, 0));
  std::set<std::uint64_t> seen;
  for (std::uint64_t root = 0; root < 4; ++root)
    for (std::uint64_t i = 0; i < 1000; ++i) seen.insert(derive_seed(root, i));
  CHECK(seen.size() == 4000);
}

TEST_CASE("rope matrix is orthogonal and matches the rotation definition") {
  std::mt19937_64 rng(3);
  for (std::size_t pos : {0u, 1u, 17u, 4095u}) {
    const Tensor r = rope_matrix(8, pos);
    const Tensor rrt = oracle::triple_loop_matmul(r, oracle::naive_transpose(r));
    CHECK(oracle::max_abs_diff(rrt, Tensor::identity(8)) < 1e-14);
    std::vector<double> x(8);
    unit_gaussian(x, rng);
    const Tensor xr = oracle::triple_loop_matmul(Tensor({1, 8}, x), r);
    const auto ref = oracle::rope_row(x, static_cast<double>(pos));
    for (std::size_t i = 0; i < 8; ++i) CHECK(xr(0, i) == doctest::Approx(ref[i]).epsilon(1e-13));
  }
}

TEST_CASE("conditioned gradient samplers") {
  std::mt19937_64 rng(9);
  const Tensor g = sample_conditioned_gradient(12, 5, GradSampler::kOrthogonal, rng);
  const auto sv = oracle::singular_values(g);
  for (Eigen::Index i = 0; i < sv.size(); ++i) CHECK(std::abs(sv(i) - 1.0) < 1e-6);
  const Tensor a = sample_conditioned_gradient(12, 5, GradSampler::kAdamLike, rng);
  for (double v : a.data()) CHECK(std::abs(v) <= 1.0);
  CHECK(parse_grad_sampler(to_string(GradSampler::kAdamLike)) == GradSampler::kAdamLike);
  CHECK_THROWS_AS(parse_grad_sampler("sgd"), ConfigError);
}

TEST_CASE("worst-case logit change agrees with an SVD oracle and dominates sampled pairs") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t dm = 3 + static_cast<std::size_t>(trial % 9), dh = 2 + 2 * static_cast<std::size_t>(trial % 4);
    const Tensor wq = randn(dm, dh, rng), wk = randn(dm, dh, rng);
    const Tensor dwq = randn(dm, dh, rng, 0.1), dwk = randn(dm, dh, rng, 0.1);
    const Tensor rot = trial % 2 == 0 ? Tensor::identity(dh) : oracle::triple_loop_matmul(
                                                                  rope_matrix(dh, 5), oracle::naive_transpose(rope_matrix(dh, 40)));
    const double lib = worst_case_delta_logit(wq, wk, dwq, dwk, dh, rot);
    const double ref = oracle_worst_case(wq, wk, dwq, dwk, rot, dh);
    CHECK(lib == doctest::Approx(ref).epsilon(1e-10));

    // Direct logit differences at random unit inputs never exceed it.
    const Tensor before = oracle::triple_loop_matmul(oracle::triple_loop_matmul(wq, rot), oracle::naive_transpose(wk));
    const Tensor after = oracle::triple_loop_matmul(oracle::triple_loop_matmul(plus(wq, dwq), rot),
                                                    oracle::naive_transpose(plus(wk, dwk)));
    std::vector<double> x(dm), y(dm);
    double best = 0.0;
    for (int s = 0; s < 200; ++s) {
      unit_gaussian(x, rng);
      unit_gaussian(y, rng);
      double v = 0.0;
      for (std::size_t i = 0; i < dm; ++i)
        for (std::size_t j = 0; j < dm; ++j) v += x[i] * (after(i, j) - before(i, j)) * y[j];
      best = std::max(best, std::abs(v) / std::sqrt(static_cast<double>(dh)));
    }
    CHECK(best <= lib * (1.0 + 1e-12));
  }
  CHECK_THROWS_AS(worst_case_delta_logit(randn(4, 2, rng), randn(4, 3, rng), randn(4, 2, rng), randn(4, 3, rng), 2),
                  DimensionError);
}

TEST_CASE("multi-head bound holds for hand-built updates") {
  // Written independently of the trial code: eta_Q = tau / |W_K|, eta_K = tau / |W_Q|
  // with D the largest gradient norm bounds the worst-case change by
  // (2 tau D + tau^2 D^2 / (|W_Q| |W_K|)) / sqrt(d_head).
  std::mt19937_64 rng(77);
  for (NormKind kind : {NormKind::kFrobenius, NormKind::kSpectral}) {
    for (int trial = 0; trial < 40; ++trial) {
      const std::size_t dm = 16, dh = 8;
      const double tau = std::pow(10.0, -2.0 + 0.1 * trial);
      const Tensor wq = randn(dm, dh, rng, 0.3), wk = randn(dm, dh, rng, 2.0);
      const Tensor gq = sample_conditioned_gradient(dm, dh, GradSampler::kAdamLike, rng);
      const Tensor gk = sample_conditioned_gradient(dm, dh, GradSampler::kOrthogonal, rng);
      const auto norm = [&](const Tensor& w) {
        return kind == NormKind::kFrobenius ? oracle::frobenius(w) : oracle::sigma_max(w);
      };
      const double nq = norm(wq), nk = norm(wk), D = std::max(norm(gq), norm(gk));
      const Tensor dwq = times(gq, -tau / nk), dwk = times(gk, -tau / nq);
      const double measured = oracle_worst_case(wq, wk, dwq, dwk, Tensor::identity(dh), dh);
      const double bound = (2.0 * tau * D + tau * tau * D * D / (nq * nk)) / std::sqrt(static_cast<double>(dh));
      CHECK(measured <= bound * (1.0 + 1e-12));
    }
  }
}

TEST_CASE("lemma norm matches the oracles and rejects zero weights") {
  std::mt19937_64 rng(5);
  const Tensor w = randn(9, 4, rng);
  CHECK(lemma_norm(w, NormKind::kFrobenius) == doctest::Approx(oracle::frobenius(w)).epsilon(1e-14));
  CHECK(lemma_norm(w, NormKind::kSpectral) == doctest::Approx(oracle::sigma_max(w)).epsilon(1e-12));
  CHECK_THROWS_AS(lemma_norm(Tensor({3, 3}), NormKind::kSpectral), DegenerateWeightError);
}

TEST_CASE("trials are deterministic and every term holds") {
  for (NormKind kind : {NormKind::kFrobenius, NormKind::kSpectral}) {
    for (GradSampler g : {GradSampler::kOrthogonal, GradSampler::kAdamLike}) {
      const LemmaTrial a = mha_lemma_trial(random_mha_setup(4, kind, g), 4);
      const LemmaTrial b = mha_lemma_trial(random_mha_setup(4, kind, g), 4);
      REQUIRE(a.terms.size() == b.terms.size());
      for (std::size_t i = 0; i < a.terms.size(); ++i) CHECK(a.terms[i].measured == b.terms[i].measured);
      CHECK(a.ok());
      const LemmaTrial m = mla_lemma_trial(random_mla_setup(4, kind, g), 4);
      CHECK(m.ok());
      CHECK(m.terms.size() > a.terms.size());
    }
  }
  MhaLemmaSetup bad;
  bad.tau_q = 0.0;
  CHECK_THROWS_AS(mha_lemma_trial(bad, 1), ConfigError);
}

TEST_CASE("small suites report no violations and are thread-count independent") {
  for (const std::string suite : {"mha", "mla"}) {
    LemmaSuiteOptions opt;
    opt.suite = suite;
    opt.trials = 40;
    opt.root_seed = 12;
    opt.norm = NormKind::kSpectral;
    opt.sampler = GradSampler::kAdamLike;
    opt.threads = 1;
    const auto one = run_lemma_suite(opt);
    opt.threads = 3;
    const auto three = run_lemma_suite(opt);
    CHECK(one.violations == 0);
    CHECK(one.max_ratio <= 1.0 + kLemmaRoundoff);
    CHECK(one.max_ratio > 0.0);
    CHECK(format_lemma_csv(one.trials) == format_lemma_csv(three.trials));
    std::size_t terms = 0;
    for (const auto& t : one.trials) terms += t.terms.size();
    const std::string csv = format_lemma_csv(one.trials);
    CHECK(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')) == terms + 1);
  }
  LemmaSuiteOptions bad;
  bad.suite = "gqa";
  CHECK_THROWS_AS(run_lemma_suite(bad), ConfigError);
}
