#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "quack/errors.hpp"
#include "quack/interventions.hpp"
#include "quack/linalg.hpp"

using namespace quack;

namespace {

ModelConfig model_of(AttentionVariant v) {
  ModelConfig m;
  m.attention.variant = v;
  return m;
}


MhaWeights& mha(ModelParams& p, std::size_t l) { return std::get<MhaWeights>(p.layers[l].attn); }
MlaWeights& mla(ModelParams& p, std::size_t l) { return std::get<MlaWeights>(p.layers[l].attn); }

void scale_tensor(Tensor& t, double s) {
  for (double& v : t.data()) v *= s;
}


}  // namespace

TEST_CASE("intervention names round-trip") {
  for (auto k : {InterventionKind::kNone, InterventionKind::kQuack, InterventionKind::kQkNorm, InterventionKind::kQkClip,
                 InterventionKind::kAblation})
    CHECK(parse_intervention_kind(to_string(k)) == k);
  CHECK_THROWS_AS(parse_intervention_kind("muclip"), ConfigError);
}

TEST_CASE("MHA QuacK starts at tau * eta and tracks the partner norm") {
  for (auto norm : {NormKind::kFrobenius, NormKind::kSpectral}) {
    const ModelConfig cfg = model_of(AttentionVariant::kMha);
    ModelParams p = init_params(cfg, 4);
    LrPlan plan = quack_init_mha(p, norm, 0.1);
    LrMap lrs = quack_step_mha(p, plan, 2e-3);
    CHECK(lrs.at("layers.1.attn.wq.2") == doctest::Approx(2e-4).epsilon(1e-14));
    CHECK(lrs.at("layers.1.attn.wk.2") == doctest::Approx(2e-4).epsilon(1e-14));
    CHECK(lrs.at("layers.1.attn.wv.2") == 2e-3);
    CHECK(lrs.at("embed") == 2e-3);

    scale_tensor(mha(p, 1).wk[2], 4.0);
    lrs = quack_step_mha(p, plan, 2e-3);
    CHECK(lrs.at("layers.1.attn.wq.2") == doctest::Approx(5e-5).epsilon(1e-12));
    CHECK(lrs.at("layers.1.attn.wk.2") == doctest::Approx(2e-4).epsilon(1e-12));
    CHECK(lrs.at("layers.1.attn.wq.1") == doctest::Approx(2e-4).epsilon(1e-12));

    // General perturbation against norms computed by the oracle.
    std::mt19937_64 rng(5);
    const Tensor k0 = std::get<MhaWeights>(init_params(cfg, 4).layers[0].attn).wk[0];
    Tensor& k = mha(p, 0).wk[0];
    k = add(k, Tensor::randn(k.shape(), rng, 0.3));
    lrs = quack_step_mha(p, plan, 1e-3);
    const double expect = 0.1 * 1e-3 * oracle::matrix_norm(k0, norm) / oracle::matrix_norm(k, norm);
    CHECK(lrs.at("layers.0.attn.wq.0") == doctest::Approx(expect).epsilon(1e-7));
  }
}

TEST_CASE("MLA factors follow the multi-head rules") {
  for (auto norm : {NormKind::kFrobenius, NormKind::kSpectral}) {
    const ModelConfig cfg = model_of(AttentionVariant::kMla);
    ModelParams p = init_params(cfg, 6);
    std::mt19937_64 rng(7);
    // Spread the per-head norms so the max over heads matters.
    for (std::size_t h = 0; h < cfg.attention.n_head; ++h) {
      scale_tensor(mla(p, 0).w_uq[h], 0.5 + static_cast<double>(h));
      scale_tensor(mla(p, 0).w_qr[h], 2.0 - 0.3 * static_cast<double>(h));
    }
    const auto got = mla_lr_factors(p, norm);
    for (std::size_t l = 0; l < cfg.n_layer; ++l) {
      const auto expect = oracle::mla_factors(mla(p, l), norm, static_cast<int>(l), cfg.attention.n_head);
      for (const auto& [name, value] : expect) {
        INFO(name);
        CHECK(got.at(name) == doctest::Approx(value).epsilon(norm == NormKind::kFrobenius ? 1e-13 : 1e-7));
      }
    }
    CHECK(got.size() == cfg.n_layer * (3 + 3 * cfg.attention.n_head));
  }
}

TEST_CASE("MLA QuacK learning rates are tau * eta * factor / initial factor") {
  const ModelConfig cfg = model_of(AttentionVariant::kMla);
  ModelParams p = init_params(cfg, 8);
  LrPlan plan = quack_init_mla(p, NormKind::kFrobenius, 0.5);
  LrMap lrs = quack_step_mla(p, plan, 1e-3);
  for (const auto& info : param_infos(p)) {
    const bool modulated = info.family && is_logit_family(*info.family);
    CHECK(lrs.at(info.name) == doctest::Approx(modulated ? 5e-4 : 1e-3).epsilon(1e-14));
  }
  const auto init = mla_lr_factors(p, NormKind::kFrobenius);
  scale_tensor(mla(p, 1).w_dkv, 3.0);
  scale_tensor(mla(p, 1).w_uk[0], 0.5);
  lrs = quack_step_mla(p, plan, 1e-3);
  const auto now = mla_lr_factors(p, NormKind::kFrobenius);
  for (const auto& [name, f0] : init) CHECK(lrs.at(name) == doctest::Approx(0.5 * 1e-3 * now.at(name) / f0).epsilon(1e-13));
  CHECK(lrs.at("layers.1.attn.w_uq.0") == doctest::Approx(5e-4 / 1.5).epsilon(1e-12));
  CHECK(lrs.at("layers.1.attn.w_uv.0") == 1e-3);
}

TEST_CASE("ablation scales every logit-forming weight by tau") {
  for (auto v : {AttentionVariant::kMha, AttentionVariant::kMla}) {
    const ModelParams p = init_params(model_of(v), 1);
    const LrMap lrs = ablation_lrs(p, 0.1, 1e-2);
    std::size_t scaled_count = 0;
    for (const auto& info : param_infos(p)) {
      const bool logit = info.family && is_logit_family(*info.family);
      scaled_count += logit;
      CHECK(lrs.at(info.name) == doctest::Approx(logit ? 1e-3 : 1e-2));
    }
    CHECK(scaled_count == (v == AttentionVariant::kMha ? 2 * 2 * 4 : 2 * (3 + 3 * 4)));
  }
}

TEST_CASE("a zero query or key weight is degenerate") {
  ModelParams p = init_params(model_of(AttentionVariant::kMha), 2);
  LrPlan plan = quack_init_mha(p, NormKind::kFrobenius, 1.0);
  scale_tensor(mha(p, 0).wk[1], 0.0);
  CHECK_THROWS_AS(quack_step_mha(p, plan, 1e-3), DegenerateWeightError);
  CHECK_THROWS_AS(weight_norm(Tensor({3, 3}), NormKind::kSpectral, "w"), DegenerateWeightError);
}

TEST_CASE("clip gamma") {
  CHECK(clip_gamma(50.0, 100.0) == 1.0);
  CHECK(clip_gamma(100.0, 100.0) == 1.0);
  CHECK(clip_gamma(400.0, 100.0) == 0.25);
  CHECK(clip_gamma(-500.0, 100.0) == 1.0);
}

TEST_CASE("MHA clip rescales only the offending head by sqrt(gamma) and resets S_max") {
  const ModelConfig cfg = model_of(AttentionVariant::kMha);
  ModelParams p = init_params(cfg, 3);
  const ModelParams before = p;
  ClipState clip(30.0, cfg.n_layer, cfg.attention.n_head);
  std::vector<std::vector<double>> seen(2, std::vector<double>(4, 10.0));
  seen[1][3] = 120.0;
  clip.observe(seen);
  const auto events = qk_clip(p, clip);
  REQUIRE(events.size() == 1);
  CHECK(events[0].layer == 1);
  CHECK(events[0].head == 3);
  CHECK(events[0].gamma == 0.25);
  const auto& w0 = std::get<MhaWeights>(before.layers[1].attn);
  const auto& w1 = mha(p, 1);
  for (std::size_t i = 0; i < w0.wq[3].size(); ++i) {
    CHECK(w1.wq[3][i] == w0.wq[3][i] * 0.5);
    CHECK(w1.wk[3][i] == w0.wk[3][i] * 0.5);
  }
  CHECK(w1.wv[3] == w0.wv[3]);
  CHECK(w1.wq[2] == w0.wq[2]);
  CHECK(mha(p, 0).wq[3] == std::get<MhaWeights>(before.layers[0].attn).wq[3]);
  CHECK(std::isinf(clip.s_max[1][3]));
  CHECK(qk_clip(p, clip).empty());
}

TEST_CASE("MLA clip scales nope and rope logit parts by exactly gamma") {
  const ModelConfig cfg = model_of(AttentionVariant::kMla);
  ModelParams p = init_params(cfg, 4);
  const ModelParams before = p;
  ClipState clip(10.0, cfg.n_layer, cfg.attention.n_head);
  std::vector<std::vector<double>> seen(2, std::vector<double>(4, -1.0));
  seen[0][1] = 37.0;
  clip.observe(seen);
  REQUIRE(qk_clip(p, clip).size() == 1);
  const double gamma = 10.0 / 37.0;
  const auto& w0 = std::get<MlaWeights>(before.layers[0].attn);
  const auto& w1 = mla(p, 0);
  CHECK(w1.w_kr == w0.w_kr);
  CHECK(w1.w_dq == w0.w_dq);
  CHECK(w1.w_uq[0] == w0.w_uq[0]);
  std::mt19937_64 rng(9);
  const Tensor x = Tensor::randn({7, cfg.d_model}, rng, 3.0);
  const MlaLogitParts a = mla_logit_parts(x, w0, cfg.attention, 1);
  const MlaLogitParts b = mla_logit_parts(x, w1, cfg.attention, 1);
  for (std::size_t i = 0; i < a.nope.size(); ++i) {
    CHECK(std::abs(b.nope[i] - gamma * a.nope[i]) <= 1e-10);
    CHECK(std::abs(b.rope[i] - gamma * a.rope[i]) <= 1e-10);
  }
}

TEST_CASE("policy construction checks the architecture") {
  const ModelConfig cfg = model_of(AttentionVariant::kMha);
  const ModelParams p = init_params(cfg, 1);
  InterventionConfig ic;
  ic.kind = InterventionKind::kQkNorm;
  CHECK_THROWS_AS(InterventionPolicy(ic, cfg, p), ConfigError);
  ModelConfig normed = cfg;
  normed.attention.qk_norm = true;
  CHECK_NOTHROW(InterventionPolicy(ic, normed, init_params(normed, 1)));
  ic.kind = InterventionKind::kQuack;
  ic.tau = 0.0;
  CHECK_THROWS_AS(InterventionPolicy(ic, cfg, p), ConfigError);
}

TEST_CASE("policies without lr rules use the base rate everywhere") {
  const ModelConfig cfg = model_of(AttentionVariant::kMla);
  ModelParams p = init_params(cfg, 1);
  for (auto k : {InterventionKind::kNone, InterventionKind::kQkClip}) {
    InterventionConfig ic;
    ic.kind = k;
    InterventionPolicy policy(ic, cfg, p);
    CHECK(policy.learning_rates(p, 3e-3) == uniform_lrs(p, 3e-3));
  }
}
