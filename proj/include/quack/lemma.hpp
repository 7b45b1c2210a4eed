#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "quack/linalg.hpp"
#include "quack/tensor.hpp"

namespace quack {

// How conditioned gradients G are drawn: Newton-Schulz orthogonalized
// Gaussians (Muon-like) or i.i.d. uniform entries in [-1, 1] (Adam-like).
enum class GradSampler { kOrthogonal, kAdamLike };

std::string_view to_string(GradSampler s);
GradSampler parse_grad_sampler(std::string_view text);

Tensor sample_conditioned_gradient(std::size_t rows, std::size_t cols, GradSampler sampler, std::mt19937_64& rng);

// Row-vector rotation matrix of rope at one position: rope(x) = x * R.
Tensor rope_matrix(std::size_t d, std::size_t position, double theta_base = 10000.0);

// max over unit x, y of |x^T (W'_Q W'_K^T - W_Q W_K^T) y| / sqrt(d_head) with
// W' = W + dW, i.e. the largest singular value of the bilinear change.
double worst_case_delta_logit(const Tensor& wq, const Tensor& wk, const Tensor& dwq, const Tensor& dwk,
                              std::size_t d_head);
// Same with a d_head x d_head rotation between query and key (R_x R_y^T).
double worst_case_delta_logit(const Tensor& wq, const Tensor& wk, const Tensor& dwq, const Tensor& dwk,
                              std::size_t d_head, const Tensor& rotation);

// Relative slack for rounding when comparing a measured value with its bound.
// Several bounds are attained with equality (e.g. an orthonormal G), so a
// measured value may exceed an exactly tight bound by a few ulps.
inline constexpr double kLemmaRoundoff = 1e-12;

// Norm used by the trials: Frobenius, or the exact largest singular value.
double lemma_norm(const Tensor& w, NormKind kind);

struct LemmaTerm {
  std::string name;
  double measured = 0.0;
  double bound = 0.0;

  double ratio() const;
  bool ok() const { return measured <= bound * (1.0 + kLemmaRoundoff); }
};

struct LemmaTrial {
  std::string suite;  // "mha" or "mla"
  std::uint64_t seed = 0;
  NormKind norm = NormKind::kFrobenius;
  GradSampler sampler = GradSampler::kOrthogonal;
  std::string dims;
  double tau = 0.0;  // tau_Q for MHA
  double D = 0.0;    // largest measured ||G||
  double c = 0.0;    // smallest weight norm
  std::vector<LemmaTerm> terms;

  bool ok() const;
};

struct MhaLemmaSetup {
  std::size_t d_model = 32;
  std::size_t d_head = 16;
  double tau_q = 0.1;
  double tau_k = 0.1;
  NormKind norm = NormKind::kFrobenius;
  GradSampler sampler = GradSampler::kOrthogonal;
  bool rope = false;
  double weight_scale = 1.0;
};

// Random weights and gradients, lrs eta_Q = tau_Q / |W_K|, eta_K = tau_K / |W_Q|.
// Terms: the two first-order products, the quadratic product and the total
// worst-case logit change against its bound.
LemmaTrial mha_lemma_trial(const MhaLemmaSetup& setup, std::uint64_t seed);

struct MlaLemmaSetup {
  std::size_t d_model = 32;
  std::size_t d_cq = 16;
  std::size_t d_ckv = 16;
  std::size_t d_nope = 8;
  std::size_t d_rope = 8;
  std::size_t n_head = 2;
  double tau = 0.1;
  NormKind norm = NormKind::kFrobenius;
  GradSampler sampler = GradSampler::kOrthogonal;
  double weight_scale = 1.0;
};

// Random MLA weights of all six logit-forming families with the multi-head
// QuacK learning rates. Per head: each of the four first-order inner-product
// terms, the quadratic term and the total change, each against its bound.
LemmaTrial mla_lemma_trial(const MlaLemmaSetup& setup, std::uint64_t seed);

// Setups drawn from a trial seed: d_model <= 32, d_head <= 16 (MHA), latent
// dims <= 16 (MLA), tau and weight scale log-uniform over several decades.
MhaLemmaSetup random_mha_setup(std::uint64_t seed, NormKind norm, GradSampler sampler);
MlaLemmaSetup random_mla_setup(std::uint64_t seed, NormKind norm, GradSampler sampler);

std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index);

struct LemmaSuiteOptions {
  std::string suite = "mha";  // mha | mla
  std::size_t trials = 1000;
  std::uint64_t root_seed = 1;
  NormKind norm = NormKind::kFrobenius;
  GradSampler sampler = GradSampler::kOrthogonal;
  unsigned threads = 0;  // 0: hardware concurrency
};

struct LemmaSuiteResult {
  std::vector<LemmaTrial> trials;
  std::size_t violations = 0;  // terms with measured > bound
  double max_ratio = 0.0;
};

LemmaSuiteResult run_lemma_suite(const LemmaSuiteOptions& options);

// One line per (trial, term).
std::string format_lemma_csv(const std::vector<LemmaTrial>& trials);

}  // namespace quack
