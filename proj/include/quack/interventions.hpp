#pragma once

#include <limits>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "quack/attention.hpp"
#include "quack/linalg.hpp"
#include "quack/model.hpp"
#include "quack/optim.hpp"

namespace quack {

enum class InterventionKind { kNone, kQuack, kQkNorm, kQkClip, kAblation };

std::string_view to_string(InterventionKind kind);
InterventionKind parse_intervention_kind(std::string_view text);

struct InterventionConfig {
  InterventionKind kind = InterventionKind::kNone;
  double tau = 1.0;         // quack, ablation
  double tau_clip = 100.0;  // qk_clip
  NormKind norm = NormKind::kFrobenius;
};

// Per-parameter state of the QuacK rules. For MHA `init` holds the initial
// norm of every query/key weight; for MLA the initial factor of every weight
// in the six logit-forming families. `current` holds the latest factor.
struct LrPlan {
  AttentionVariant variant = AttentionVariant::kMha;
  NormKind norm = NormKind::kFrobenius;
  double tau = 1.0;
  std::map<std::string, double> init;
  std::map<std::string, double> current;
};

// Norm of one weight; throws DegenerateWeightError when it is not positive.
double weight_norm(const Tensor& w, NormKind kind, const std::string& name);

LrPlan quack_init_mha(const ModelParams& params, NormKind norm, double tau);
// Query weights get tau * eta * |W_K(0)| / |W_K(t)| of their own head, key
// weights the mirror image; every other parameter gets eta.
LrMap quack_step_mha(const ModelParams& params, LrPlan& plan, double eta);

struct MlaLayerNorms {
  double dq = 0, dkv = 0, kr = 0;
  std::vector<double> uq, qr, uk;  // per head
};
using MlaLayerFactors = MlaLayerNorms;

MlaLayerNorms mla_layer_norms(const MlaWeights& w, NormKind kind, int layer = 0);
MlaLayerFactors mla_lr_factors(const MlaLayerNorms& n);
// Factor of every MLA logit-forming weight, keyed by parameter name.
std::map<std::string, double> mla_lr_factors(const ModelParams& params, NormKind kind);

LrPlan quack_init_mla(const ModelParams& params, NormKind norm, double tau);
LrMap quack_step_mla(const ModelParams& params, LrPlan& plan, double eta);

// Dispatch on the model's attention variant.
LrPlan quack_init(const ModelParams& params, NormKind norm, double tau);
LrMap quack_step(const ModelParams& params, LrPlan& plan, double eta);

// tau * eta on every query/key family, eta elsewhere.
LrMap ablation_lrs(const ModelParams& params, double tau, double eta);

// True for the weights whose learning rate QuacK and the ablation modulate.
bool is_logit_family(AttnFamily f);

struct ClipState {
  double tau_clip = 100.0;
  std::vector<std::vector<double>> s_max;       // [layer][head], signed
  std::vector<std::vector<double>> last_gamma;  // [layer][head]

  ClipState() = default;
  ClipState(double tau_clip, std::size_t n_layer, std::size_t n_head);
  void observe(const std::vector<std::vector<double>>& max_logit);
  void reset();
};

double clip_gamma(double s_max, double tau_clip);

struct ClipEvent {
  int layer = 0;
  int head = 0;
  double s_max = 0.0;
  double gamma = 1.0;
};

// Rescales the heads whose S_max exceeds tau_clip, then resets S_max.
// MHA: sqrt(gamma) on W_Q and W_K. MLA: sqrt(gamma) on W_uq and W_uk, gamma on
// W_qr; the shared W_kr is left alone.
std::vector<ClipEvent> qk_clip(ModelParams& params, ClipState& clip);

// A configured intervention for one run.
class InterventionPolicy {
 public:
  InterventionPolicy(const InterventionConfig& cfg, const ModelConfig& model, const ModelParams& init);

  // Learning rates for the coming step given the scheduled base rate.
  LrMap learning_rates(const ModelParams& params, double eta);
  // Called with the max logits of the step's training forward, after the
  // optimizer step. Applies the clip when configured.
  std::vector<ClipEvent> after_step(ModelParams& params, const std::vector<std::vector<double>>& max_logit);

  const InterventionConfig& config() const noexcept { return cfg_; }
  const LrPlan* plan() const noexcept { return cfg_.kind == InterventionKind::kQuack ? &plan_ : nullptr; }
  const ClipState* clip() const noexcept { return cfg_.kind == InterventionKind::kQkClip ? &clip_ : nullptr; }

 private:
  InterventionConfig cfg_;
  LrPlan plan_;
  ClipState clip_;
};

}  // namespace quack
