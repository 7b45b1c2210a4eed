#include "quack/lemma.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <thread>

#include "quack/autodiff.hpp"
#include "quack/errors.hpp"
#include "quack/interventions.hpp"
#include "quack/optim.hpp"
#include "quack/text.hpp"

namespace quack {

std::string_view to_string(GradSampler s) { return s == GradSampler::kOrthogonal ? "orthogonal" : "adam"; }

GradSampler parse_grad_sampler(std::string_view text) {
  if (text == "orthogonal") return GradSampler::kOrthogonal;
  if (text == "adam") return GradSampler::kAdamLike;
  throw ConfigError("unknown gradient sampler '" + std::string(text) + "' (expected orthogonal|adam)");
}

Tensor sample_conditioned_gradient(std::size_t rows, std::size_t cols, GradSampler sampler, std::mt19937_64& rng) {
  if (sampler == GradSampler::kOrthogonal) return newton_schulz(Tensor::randn({rows, cols}, rng));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor g({rows, cols});
  for (double& v : g.data()) v = u(rng);
  return g;
}

Tensor rope_matrix(std::size_t d, std::size_t position, double theta_base) {
  const std::vector<std::size_t> pos(d, position);
  return rope(Tensor::identity(d), pos, theta_base);
}

double worst_case_delta_logit(const Tensor& wq, const Tensor& wk, const Tensor& dwq, const Tensor& dwk,
                              std::size_t d_head) {
  return worst_case_delta_logit(wq, wk, dwq, dwk, d_head, Tensor::identity(wq.cols()));
}

double worst_case_delta_logit(const Tensor& wq, const Tensor& wk, const Tensor& dwq, const Tensor& dwk,
                              std::size_t d_head, const Tensor& rotation) {
  if (wq.shape() != dwq.shape() || wk.shape() != dwk.shape() || wq.cols() != wk.cols())
    throw DimensionError("worst_case_delta_logit: incompatible weight shapes");
  const Tensor before = matmul_nt(matmul(wq, rotation), wk);
  const Tensor after = matmul_nt(matmul(add(wq, dwq), rotation), add(wk, dwk));
  return max_singular_value(sub(after, before)) / std::sqrt(static_cast<double>(d_head));
}

double lemma_norm(const Tensor& w, NormKind kind) {
  const double n = kind == NormKind::kFrobenius ? frobenius_norm(w) : max_singular_value(w);
  if (!(n > 0.0)) throw DegenerateWeightError("lemma trial sampled a weight with zero norm");
  return n;
}

double LemmaTerm::ratio() const {
  if (bound > 0.0) return measured / bound;
  return measured > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
}

bool LemmaTrial::ok() const {
  return std::all_of(terms.begin(), terms.end(), [](const LemmaTerm& t) { return t.ok(); });
}

std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index) {
  // splitmix64 of (root, index)
  std::uint64_t z = root + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

double log_uniform(std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(std::log(lo), std::log(hi));
  return std::exp(u(rng));
}

std::size_t uniform_size(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

Tensor gaussian(std::size_t rows, std::size_t cols, double scale, std::mt19937_64& rng) {
  return Tensor::randn({rows, cols}, rng, scale / std::sqrt(static_cast<double>(rows)));
}

// Parameter after one step -eta * G.
Tensor stepped(const Tensor& w, double eta, const Tensor& g) { return sub(w, scaled(g, eta)); }

std::string dims_string(std::initializer_list<std::pair<const char*, std::size_t>> dims) {
  std::string out;
  for (const auto& [k, v] : dims) out += (out.empty() ? "" : " ") + std::string(k) + "=" + std::to_string(v);
  return out;
}

}  // namespace

LemmaTrial mha_lemma_trial(const MhaLemmaSetup& s, std::uint64_t seed) {
  if (!(s.tau_q > 0.0) || !(s.tau_k > 0.0)) throw ConfigError("mha_lemma_trial: taus must be positive");
  if (s.rope && s.d_head % 2 != 0) throw DimensionError("mha_lemma_trial: rope needs an even d_head");
  std::mt19937_64 rng(seed);
  const Tensor wq = gaussian(s.d_model, s.d_head, s.weight_scale, rng);
  const Tensor wk = gaussian(s.d_model, s.d_head, s.weight_scale, rng);
  const Tensor gq = sample_conditioned_gradient(s.d_model, s.d_head, s.sampler, rng);
  const Tensor gk = sample_conditioned_gradient(s.d_model, s.d_head, s.sampler, rng);
  Tensor rotation = Tensor::identity(s.d_head);
  if (s.rope) {
    std::uniform_int_distribution<std::size_t> pos(0, 4095);
    const std::size_t px = pos(rng), py = pos(rng);
    rotation = matmul_nt(rope_matrix(s.d_head, px), rope_matrix(s.d_head, py));
  }

  const double nq = lemma_norm(wq, s.norm);
  const double nk = lemma_norm(wk, s.norm);
  const double D = std::max(lemma_norm(gq, s.norm), lemma_norm(gk, s.norm));
  const double eta_q = s.tau_q / nk;
  const double eta_k = s.tau_k / nq;
  const Tensor dwq = scaled(gq, -eta_q);
  const Tensor dwk = scaled(gk, -eta_k);
  const double sqrt_dh = std::sqrt(static_cast<double>(s.d_head));

  LemmaTrial t;
  t.suite = "mha";
  t.seed = seed;
  t.norm = s.norm;
  t.sampler = s.sampler;
  t.dims = dims_string({{"d_model", s.d_model}, {"d_head", s.d_head}}) + (s.rope ? " rope" : "");
  t.tau = s.tau_q;
  t.D = D;
  t.c = std::min(nq, nk);
  t.terms.push_back({"dq.k", max_singular_value(matmul_nt(matmul(dwq, rotation), wk)), s.tau_q * D});
  t.terms.push_back({"q.dk", max_singular_value(matmul_nt(matmul(wq, rotation), dwk)), s.tau_k * D});
  t.terms.push_back({"quadratic", max_singular_value(dwq) * max_singular_value(dwk),
                     s.tau_q * s.tau_k * D * D / (nq * nk)});
  t.terms.push_back({"total", worst_case_delta_logit(wq, wk, dwq, dwk, s.d_head, rotation),
                     (s.tau_q * D + s.tau_k * D + s.tau_q * s.tau_k * D * D / (nq * nk)) / sqrt_dh});
  return t;
}

LemmaTrial mla_lemma_trial(const MlaLemmaSetup& s, std::uint64_t seed) {
  if (!(s.tau > 0.0)) throw ConfigError("mla_lemma_trial: tau must be positive");
  if (s.d_rope % 2 != 0) throw DimensionError("mla_lemma_trial: d_rope must be even");
  std::mt19937_64 rng(seed);
  const double ws = s.weight_scale;
  const std::size_t H = s.n_head;

  MlaWeights w;
  w.w_dq = gaussian(s.d_model, s.d_cq, ws, rng);
  w.w_dkv = gaussian(s.d_model, s.d_ckv, ws, rng);
  w.w_kr = gaussian(s.d_model, s.d_rope, ws, rng);
  for (std::size_t h = 0; h < H; ++h) {
    w.w_uq.push_back(gaussian(s.d_cq, s.d_nope, ws, rng));
    w.w_qr.push_back(gaussian(s.d_cq, s.d_rope, ws, rng));
    w.w_uk.push_back(gaussian(s.d_ckv, s.d_nope, ws, rng));
  }
  auto grad = [&](const Tensor& like) { return sample_conditioned_gradient(like.rows(), like.cols(), s.sampler, rng); };
  const Tensor g_dq = grad(w.w_dq), g_dkv = grad(w.w_dkv), g_kr = grad(w.w_kr);
  std::vector<Tensor> g_uq, g_qr, g_uk;
  for (std::size_t h = 0; h < H; ++h) {
    g_uq.push_back(grad(w.w_uq[h]));
    g_qr.push_back(grad(w.w_qr[h]));
    g_uk.push_back(grad(w.w_uk[h]));
  }
  std::uniform_int_distribution<std::size_t> pos(0, 4095);
  const std::size_t px = pos(rng), py = pos(rng);
  const Tensor rq = rope_matrix(s.d_rope, px), rk = rope_matrix(s.d_rope, py);
  const Tensor rqk = matmul_nt(rq, rk);

  MlaLayerNorms n;
  n.dq = lemma_norm(w.w_dq, s.norm);
  n.dkv = lemma_norm(w.w_dkv, s.norm);
  n.kr = lemma_norm(w.w_kr, s.norm);
  for (std::size_t h = 0; h < H; ++h) {
    n.uq.push_back(lemma_norm(w.w_uq[h], s.norm));
    n.qr.push_back(lemma_norm(w.w_qr[h], s.norm));
    n.uk.push_back(lemma_norm(w.w_uk[h], s.norm));
  }
  const MlaLayerFactors f = mla_lr_factors(n);
  double D = std::max({lemma_norm(g_dq, s.norm), lemma_norm(g_dkv, s.norm), lemma_norm(g_kr, s.norm)});
  double c = std::min({n.dq, n.dkv, n.kr});
  for (std::size_t h = 0; h < H; ++h) {
    D = std::max({D, lemma_norm(g_uq[h], s.norm), lemma_norm(g_qr[h], s.norm), lemma_norm(g_uk[h], s.norm)});
    c = std::min({c, n.uq[h], n.qr[h], n.uk[h]});
  }

  const double tau = s.tau;
  const double eta_dq = tau * f.dq, eta_dkv = tau * f.dkv, eta_kr = tau * f.kr;
  const Tensor dq2 = stepped(w.w_dq, eta_dq, g_dq);
  const Tensor dkv2 = stepped(w.w_dkv, eta_dkv, g_dkv);
  const Tensor kr2 = stepped(w.w_kr, eta_kr, g_kr);
  const double sqrt_dh = std::sqrt(static_cast<double>(s.d_nope + s.d_rope));

  LemmaTrial t;
  t.suite = "mla";
  t.seed = seed;
  t.norm = s.norm;
  t.sampler = s.sampler;
  t.dims = dims_string({{"d_model", s.d_model},
                        {"d_cq", s.d_cq},
                        {"d_ckv", s.d_ckv},
                        {"d_nope", s.d_nope},
                        {"d_rope", s.d_rope},
                        {"n_head", H}});
  t.tau = tau;
  t.D = D;
  t.c = c;

  for (std::size_t h = 0; h < H; ++h) {
    const double eta_uq = tau * f.uq[h], eta_qr = tau * f.qr[h], eta_uk = tau * f.uk[h];
    const Tensor uq2 = stepped(w.w_uq[h], eta_uq, g_uq[h]);
    const Tensor qr2 = stepped(w.w_qr[h], eta_qr, g_qr[h]);
    const Tensor uk2 = stepped(w.w_uk[h], eta_uk, g_uk[h]);

    // Token -> component maps (rows are input features).
    const Tensor qn = matmul(w.w_dq, w.w_uq[h]), qn2 = matmul(dq2, uq2);
    const Tensor qr = matmul(w.w_dq, w.w_qr[h]), qr_2 = matmul(dq2, qr2);
    const Tensor kn = matmul(w.w_dkv, w.w_uk[h]), kn2 = matmul(dkv2, uk2);
    const Tensor& krm = w.w_kr;
    const Tensor d_qn = sub(qn2, qn), d_qr = sub(qr_2, qr), d_kn = sub(kn2, kn), d_kr = sub(kr2, krm);

    const double b_qn = eta_uq * D * n.dq + eta_dq * D * n.uq[h] + eta_uq * eta_dq * D * D;
    const double b_qr = eta_qr * D * n.dq + eta_dq * D * n.qr[h] + eta_qr * eta_dq * D * D;
    const double b_kn = eta_uk * D * n.dkv + eta_dkv * D * n.uk[h] + eta_uk * eta_dkv * D * D;
    const double b_kr = eta_kr * D;

    const double bound_qn_k = 2 * tau * D + eta_uq * eta_dq * D * D * n.uk[h] * n.dkv;
    const double bound_qr_k = 2 * tau * D + eta_qr * eta_dq * D * D * n.kr;
    const double bound_q_kn = 2 * tau * D + eta_uk * eta_dkv * D * D * n.uq[h] * n.dq;
    const double bound_q_kr = tau * D;
    const double bound_quad = std::hypot(b_qn, b_qr) * std::hypot(b_kn, b_kr);

    const std::string hs = "h" + std::to_string(h) + ":";
    t.terms.push_back({hs + "dq_nope.k_nope", max_singular_value(matmul_nt(d_qn, kn)), bound_qn_k});
    t.terms.push_back({hs + "dq_rope.k_rope", max_singular_value(matmul_nt(matmul(d_qr, rqk), krm)), bound_qr_k});
    t.terms.push_back({hs + "q_nope.dk_nope", max_singular_value(matmul_nt(qn, d_kn)), bound_q_kn});
    t.terms.push_back({hs + "q_rope.dk_rope", max_singular_value(matmul_nt(matmul(qr, rqk), d_kr)), bound_q_kr});

    const Tensor dq_full = hconcat(d_qn, matmul(d_qr, rq));
    const Tensor dk_full = hconcat(d_kn, matmul(d_kr, rk));
    t.terms.push_back({hs + "quadratic", max_singular_value(dq_full) * max_singular_value(dk_full), bound_quad});

    const Tensor q_before = hconcat(qn, matmul(qr, rq)), q_after = hconcat(qn2, matmul(qr_2, rq));
    const Tensor k_before = hconcat(kn, matmul(krm, rk)), k_after = hconcat(kn2, matmul(kr2, rk));
    const double total = max_singular_value(sub(matmul_nt(q_after, k_after), matmul_nt(q_before, k_before)));
    t.terms.push_back(
        {hs + "total", total / sqrt_dh, (bound_qn_k + bound_qr_k + bound_q_kn + bound_q_kr + bound_quad) / sqrt_dh});
  }
  return t;
}

MhaLemmaSetup random_mha_setup(std::uint64_t seed, NormKind norm, GradSampler sampler) {
  std::mt19937_64 rng(derive_seed(seed, 0x5e7));
  MhaLemmaSetup s;
  s.d_model = uniform_size(rng, 4, 32);
  s.d_head = 2 * uniform_size(rng, 1, 8);
  s.tau_q = log_uniform(rng, 1e-3, 10.0);
  s.tau_k = log_uniform(rng, 1e-3, 10.0);
  s.weight_scale = log_uniform(rng, 0.1, 10.0);
  s.rope = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
  s.norm = norm;
  s.sampler = sampler;
  return s;
}

MlaLemmaSetup random_mla_setup(std::uint64_t seed, NormKind norm, GradSampler sampler) {
  std::mt19937_64 rng(derive_seed(seed, 0x11a));
  MlaLemmaSetup s;
  s.d_model = uniform_size(rng, 8, 32);
  s.d_cq = uniform_size(rng, 2, 16);
  s.d_ckv = uniform_size(rng, 2, 16);
  s.d_nope = uniform_size(rng, 1, 8);
  s.d_rope = 2 * uniform_size(rng, 1, 4);
  s.n_head = uniform_size(rng, 1, 4);
  s.tau = log_uniform(rng, 1e-3, 10.0);
  s.weight_scale = log_uniform(rng, 0.1, 10.0);
  s.norm = norm;
  s.sampler = sampler;
  return s;
}

LemmaSuiteResult run_lemma_suite(const LemmaSuiteOptions& o) {
  if (o.suite != "mha" && o.suite != "mla") throw ConfigError("lemma suite must be mha or mla");
  LemmaSuiteResult r;
  r.trials.resize(o.trials);
  unsigned threads = o.threads ? o.threads : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(1, o.trials)));
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < o.trials; i = next++) {
      const std::uint64_t seed = derive_seed(o.root_seed, i);
      r.trials[i] = o.suite == "mha" ? mha_lemma_trial(random_mha_setup(seed, o.norm, o.sampler), seed)
                                     : mla_lemma_trial(random_mla_setup(seed, o.norm, o.sampler), seed);
    }
  };
  std::vector<std::thread> pool;
  for (unsigned i = 1; i < threads; ++i) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();

  for (const auto& t : r.trials) {
    for (const auto& term : t.terms) {
      if (!term.ok()) ++r.violations;
      r.max_ratio = std::max(r.max_ratio, term.ratio());
    }
  }
  return r;
}

std::string format_lemma_csv(const std::vector<LemmaTrial>& trials) {
  std::string out = "suite,seed,norm,sampler,dims,tau,D,c,term,measured,bound,ratio,ok\n";
  for (const auto& t : trials) {
    for (const auto& term : t.terms) {
      out += t.suite + "," + std::to_string(t.seed) + "," + std::string(to_string(t.norm)) + "," +
             std::string(to_string(t.sampler)) + "," + t.dims + "," + text::format_double(t.tau) + "," +
             text::format_double(t.D) + "," + text::format_double(t.c) + "," + term.name + "," +
             text::format_double(term.measured) + "," + text::format_double(term.bound) + "," +
             text::format_double(term.ratio()) + "," + (term.ok() ? "1" : "0") + "\n";
    }
  }
  return out;
}

}  // namespace quack
