#include "quack/interventions.hpp"

#include <algorithm>
#include <cmath>

#include "quack/errors.hpp"

namespace quack {

std::string_view to_string(InterventionKind kind) {
  switch (kind) {
    case InterventionKind::kNone: return "none";
    case InterventionKind::kQuack: return "quack";
    case InterventionKind::kQkNorm: return "qk_norm";
    case InterventionKind::kQkClip: return "qk_clip";
    case InterventionKind::kAblation: return "ablation";
  }
  return "?";
}

InterventionKind parse_intervention_kind(std::string_view text) {
  for (auto k : {InterventionKind::kNone, InterventionKind::kQuack, InterventionKind::kQkNorm,
                 InterventionKind::kQkClip, InterventionKind::kAblation}) {
    if (text == to_string(k)) return k;
  }
  throw ConfigError("unknown intervention '" + std::string(text) + "' (expected none|quack|qk_norm|qk_clip|ablation)");
}

bool is_logit_family(AttnFamily f) {
  switch (f) {
    case AttnFamily::kWq:
    case AttnFamily::kWk:
    case AttnFamily::kDq:
    case AttnFamily::kDkv:
    case AttnFamily::kKr:
    case AttnFamily::kUq:
    case AttnFamily::kQr:
    case AttnFamily::kUk:
      return true;
    default:
      return false;
  }
}

double weight_norm(const Tensor& w, NormKind kind, const std::string& name) {
  const double n = matrix_norm(w, kind);
  if (!(n > 0.0) || !std::isfinite(n))
    throw DegenerateWeightError("weight " + name + " has norm " + std::to_string(n) + "; a positive norm is required");
  return n;
}

namespace {

const MhaWeights& mha_of(const LayerParamsT<Tensor>& layer, const char* op) {
  if (const auto* w = std::get_if<MhaWeights>(&layer.attn)) return *w;
  throw ConfigError(std::string(op) + ": model does not use MHA");
}

const MlaWeights& mla_of(const LayerParamsT<Tensor>& layer, const char* op) {
  if (const auto* w = std::get_if<MlaWeights>(&layer.attn)) return *w;
  throw ConfigError(std::string(op) + ": model does not use MLA");
}

// Current norms of every MHA query/key weight keyed by name.
std::map<std::string, double> mha_norms(const ModelParams& params, NormKind kind) {
  std::map<std::string, double> out;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const MhaWeights& w = mha_of(params.layers[l], "quack (mha)");
    const int li = static_cast<int>(l);
    for (std::size_t h = 0; h < w.wq.size(); ++h) {
      const int hi = static_cast<int>(h);
      const auto q = attn_param_name(li, AttnFamily::kWq, hi);
      const auto k = attn_param_name(li, AttnFamily::kWk, hi);
      out[q] = weight_norm(w.wq[h], kind, q);
      out[k] = weight_norm(w.wk[h], kind, k);
    }
  }
  return out;
}

std::string partner_name(const std::string& name) {
  // layers.L.attn.wq.H <-> layers.L.attn.wk.H
  std::string out = name;
  const auto pos = out.find(".attn.w");
  out[pos + 7] = out[pos + 7] == 'q' ? 'k' : 'q';
  return out;
}

}  // namespace

LrPlan quack_init_mha(const ModelParams& params, NormKind norm, double tau) {
  LrPlan plan;
  plan.variant = AttentionVariant::kMha;
  plan.norm = norm;
  plan.tau = tau;
  plan.init = mha_norms(params, norm);
  for (const auto& [name, n] : plan.init) plan.current[name] = 1.0 / n;
  return plan;
}

LrMap quack_step_mha(const ModelParams& params, LrPlan& plan, double eta) {
  const auto now = mha_norms(params, plan.norm);
  LrMap lrs = uniform_lrs(params, eta);
  for (const auto& [name, n] : now) {
    const std::string partner = partner_name(name);
    const auto it = plan.init.find(partner);
    if (it == plan.init.end()) throw ConfigError("quack plan lacks initial norm for " + partner);
    plan.current[name] = 1.0 / now.at(partner);
    lrs[name] = plan.tau * eta * it->second / now.at(partner);
  }
  return lrs;
}

MlaLayerNorms mla_layer_norms(const MlaWeights& w, NormKind kind, int layer) {
  auto norm = [&](const Tensor& t, AttnFamily fam, int head) {
    return weight_norm(t, kind, attn_param_name(layer, fam, head));
  };
  MlaLayerNorms n;
  n.dq = norm(w.w_dq, AttnFamily::kDq, -1);
  n.dkv = norm(w.w_dkv, AttnFamily::kDkv, -1);
  n.kr = norm(w.w_kr, AttnFamily::kKr, -1);
  for (std::size_t h = 0; h < w.w_uq.size(); ++h) {
    const int hi = static_cast<int>(h);
    n.uq.push_back(norm(w.w_uq[h], AttnFamily::kUq, hi));
    n.qr.push_back(norm(w.w_qr[h], AttnFamily::kQr, hi));
    n.uk.push_back(norm(w.w_uk[h], AttnFamily::kUk, hi));
  }
  return n;
}

MlaLayerFactors mla_lr_factors(const MlaLayerNorms& n) {
  auto positive = [](double v, const char* what) {
    if (!(v > 0.0) || !std::isfinite(v))
      throw DegenerateWeightError(std::string("mla_lr_factors: norm of ") + what + " must be positive");
  };
  positive(n.dq, "w_dq");
  positive(n.dkv, "w_dkv");
  positive(n.kr, "w_kr");
  const std::size_t heads = n.uq.size();
  if (heads == 0 || n.qr.size() != heads || n.uk.size() != heads)
    throw DimensionError("mla_lr_factors: per-head norm lists must be non-empty and of equal length");

  MlaLayerFactors f;
  double max_uq_uk = 0.0, max_qr = 0.0, max_uq_uk_dq = 0.0;
  for (std::size_t h = 0; h < heads; ++h) {
    positive(n.uq[h], "w_uq");
    positive(n.qr[h], "w_qr");
    positive(n.uk[h], "w_uk");
    f.uq.push_back(1.0 / (n.dq * n.uk[h] * n.dkv));
    f.uk.push_back(1.0 / (n.uq[h] * n.dq * n.dkv));
    f.qr.push_back(1.0 / (n.dq * n.kr));
    max_uq_uk = std::max(max_uq_uk, n.uq[h] * n.uk[h] * n.dkv);
    max_qr = std::max(max_qr, n.qr[h] * n.kr);
    max_uq_uk_dq = std::max(max_uq_uk_dq, n.uq[h] * n.dq * n.uk[h]);
  }
  f.dq = std::min(1.0 / max_uq_uk, 1.0 / max_qr);
  f.dkv = 1.0 / max_uq_uk_dq;
  double max_qr_dq = 0.0;
  for (std::size_t h = 0; h < heads; ++h) max_qr_dq = std::max(max_qr_dq, n.qr[h] * n.dq);
  f.kr = 1.0 / max_qr_dq;
  return f;
}

std::map<std::string, double> mla_lr_factors(const ModelParams& params, NormKind kind) {
  std::map<std::string, double> out;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const int li = static_cast<int>(l);
    const MlaLayerFactors f = mla_lr_factors(mla_layer_norms(mla_of(params.layers[l], "quack (mla)"), kind, li));
    out[attn_param_name(li, AttnFamily::kDq, -1)] = f.dq;
    out[attn_param_name(li, AttnFamily::kDkv, -1)] = f.dkv;
    out[attn_param_name(li, AttnFamily::kKr, -1)] = f.kr;
    for (std::size_t h = 0; h < f.uq.size(); ++h) {
      const int hi = static_cast<int>(h);
      out[attn_param_name(li, AttnFamily::kUq, hi)] = f.uq[h];
      out[attn_param_name(li, AttnFamily::kQr, hi)] = f.qr[h];
      out[attn_param_name(li, AttnFamily::kUk, hi)] = f.uk[h];
    }
  }
  return out;
}

LrPlan quack_init_mla(const ModelParams& params, NormKind norm, double tau) {
  LrPlan plan;
  plan.variant = AttentionVariant::kMla;
  plan.norm = norm;
  plan.tau = tau;
  plan.init = mla_lr_factors(params, norm);
  plan.current = plan.init;
  return plan;
}

LrMap quack_step_mla(const ModelParams& params, LrPlan& plan, double eta) {
  plan.current = mla_lr_factors(params, plan.norm);
  LrMap lrs = uniform_lrs(params, eta);
  for (const auto& [name, factor] : plan.current) {
    const auto it = plan.init.find(name);
    if (it == plan.init.end()) throw ConfigError("quack plan lacks initial factor for " + name);
    lrs[name] = plan.tau * eta * factor / it->second;
  }
  return lrs;
}

LrPlan quack_init(const ModelParams& params, NormKind norm, double tau) {
  if (params.layers.empty()) throw ConfigError("quack_init: model has no layers");
  return std::holds_alternative<MhaWeights>(params.layers.front().attn) ? quack_init_mha(params, norm, tau)
                                                                       : quack_init_mla(params, norm, tau);
}

LrMap quack_step(const ModelParams& params, LrPlan& plan, double eta) {
  return plan.variant == AttentionVariant::kMha ? quack_step_mha(params, plan, eta)
                                                : quack_step_mla(params, plan, eta);
}

LrMap ablation_lrs(const ModelParams& params, double tau, double eta) {
  LrMap lrs;
  for_each_param(params, [&](const ParamInfo& info, const Tensor&) {
    lrs[info.name] = info.family && is_logit_family(*info.family) ? tau * eta : eta;
  });
  return lrs;
}

// ---------------------------------------------------------------------------
// QK clip

ClipState::ClipState(double tau, std::size_t n_layer, std::size_t n_head)
    : tau_clip(tau),
      s_max(n_layer, std::vector<double>(n_head, -std::numeric_limits<double>::infinity())),
      last_gamma(n_layer, std::vector<double>(n_head, 1.0)) {
  if (!(tau > 0.0)) throw ConfigError("tau_clip must be positive");
}

void ClipState::observe(const std::vector<std::vector<double>>& max_logit) {
  if (max_logit.size() != s_max.size()) throw DimensionError("ClipState::observe: layer count mismatch");
  for (std::size_t l = 0; l < s_max.size(); ++l) {
    if (max_logit[l].size() != s_max[l].size()) throw DimensionError("ClipState::observe: head count mismatch");
    for (std::size_t h = 0; h < s_max[l].size(); ++h) s_max[l][h] = std::max(s_max[l][h], max_logit[l][h]);
  }
}

void ClipState::reset() {
  for (auto& layer : s_max) std::fill(layer.begin(), layer.end(), -std::numeric_limits<double>::infinity());
}

double clip_gamma(double s_max, double tau_clip) {
  return s_max > tau_clip ? tau_clip / s_max : 1.0;
}

std::vector<ClipEvent> qk_clip(ModelParams& params, ClipState& clip) {
  if (clip.s_max.size() != params.layers.size()) throw DimensionError("qk_clip: layer count mismatch");
  std::vector<ClipEvent> events;
  auto scale_in_place = [](Tensor& t, double s) {
    for (double& v : t.data()) v *= s;
    t.round_to_precision();
  };
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    for (std::size_t h = 0; h < clip.s_max[l].size(); ++h) {
      const double gamma = clip_gamma(clip.s_max[l][h], clip.tau_clip);
      clip.last_gamma[l][h] = gamma;
      if (gamma >= 1.0) continue;
      const double root = std::sqrt(gamma);
      std::visit(
          [&](auto& w) {
            if constexpr (requires { w.wq; }) {
              scale_in_place(w.wq.at(h), root);
              scale_in_place(w.wk.at(h), root);
            } else {
              scale_in_place(w.w_uq.at(h), root);
              scale_in_place(w.w_uk.at(h), root);
              scale_in_place(w.w_qr.at(h), gamma);
            }
          },
          params.layers[l].attn);
      events.push_back({static_cast<int>(l), static_cast<int>(h), clip.s_max[l][h], gamma});
    }
  }
  clip.reset();
  return events;
}

// ---------------------------------------------------------------------------

InterventionPolicy::InterventionPolicy(const InterventionConfig& cfg, const ModelConfig& model,
                                       const ModelParams& init)
    : cfg_(cfg) {
  switch (cfg.kind) {
    case InterventionKind::kQuack:
      if (!(cfg.tau > 0.0)) throw ConfigError("quack requires tau > 0");
      plan_ = quack_init(init, cfg.norm, cfg.tau);
      break;
    case InterventionKind::kAblation:
      if (!(cfg.tau > 0.0)) throw ConfigError("ablation requires tau > 0");
      break;
    case InterventionKind::kQkClip:
      clip_ = ClipState(cfg.tau_clip, model.n_layer, model.attention.n_head);
      break;
    case InterventionKind::kQkNorm:
      if (!model.attention.qk_norm) throw ConfigError("qk_norm intervention requires attention qk_norm enabled");
      break;
    case InterventionKind::kNone:
      break;
  }
}

LrMap InterventionPolicy::learning_rates(const ModelParams& params, double eta) {
  switch (cfg_.kind) {
    case InterventionKind::kQuack: return quack_step(params, plan_, eta);
    case InterventionKind::kAblation: return ablation_lrs(params, cfg_.tau, eta);
    default: return uniform_lrs(params, eta);
  }
}

std::vector<ClipEvent> InterventionPolicy::after_step(ModelParams& params,
                                                      const std::vector<std::vector<double>>& max_logit) {
  if (cfg_.kind != InterventionKind::kQkClip) return {};
  clip_.observe(max_logit);
  return qk_clip(params, clip_);
}

}  // namespace quack
