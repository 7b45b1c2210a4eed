#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "quack/autodiff.hpp"
#include "quack/tensor.hpp"

namespace quack {

enum class AttentionVariant { kMha, kMla };

std::string_view to_string(AttentionVariant v);
AttentionVariant parse_attention_variant(std::string_view text);

struct AttentionConfig {
  AttentionVariant variant = AttentionVariant::kMha;
  std::size_t d_model = 64;
  std::size_t n_head = 4;
  std::size_t d_head = 16;  // MLA: must equal d_nope + d_rope
  std::size_t d_nope = 8;
  std::size_t d_rope = 8;
  std::size_t d_cq = 32;
  std::size_t d_ckv = 16;
  bool qk_norm = false;
  bool causal = true;
  bool track_max_logit = true;
  bool mha_rope = true;  // MLA always rotates its decoupled rope parts
  double rope_base = 10000.0;
  double norm_eps = 1e-6;

  void validate() const;  // throws ConfigError
  double logit_scale() const;  // 1 / sqrt(d_head)
};

// Parameter families of one attention layer. Head-indexed families carry one
// matrix per head; the others are shared across heads.
enum class AttnFamily { kWq, kWk, kWv, kWo, kQGain, kKGain, kDq, kDkv, kKr, kUq, kQr, kUk, kUv };

std::string_view family_name(AttnFamily f);

// Row-vector convention throughout: q = x * W_Q with W_Q of shape d_model x d_head.
template <class T>
struct MhaWeightsT {
  std::vector<T> wq, wk, wv;  // per head, d_model x d_head
  T wo;                       // (n_head * d_head) x d_model
  std::vector<T> q_gain, k_gain;  // per head, length d_head; empty unless qk_norm
};

template <class T>
struct MlaWeightsT {
  T w_dq;   // d_model x d_cq
  T w_dkv;  // d_model x d_ckv
  T w_kr;   // d_model x d_rope, shared by all heads
  std::vector<T> w_uq;  // per head, d_cq x d_nope
  std::vector<T> w_qr;  // per head, d_cq x d_rope
  std::vector<T> w_uk;  // per head, d_ckv x d_nope
  std::vector<T> w_uv;  // per head, d_ckv x d_head
  T wo;                 // (n_head * d_head) x d_model
  std::vector<T> q_gain, k_gain;  // per head, length d_head; empty unless qk_norm
};

using MhaWeights = MhaWeightsT<Tensor>;
using MlaWeights = MlaWeightsT<Tensor>;
using MhaVars = MhaWeightsT<Var>;
using MlaVars = MlaWeightsT<Var>;

// Visits every tensor of a weight set in a fixed order as f(family, head, t),
// head = -1 for shared tensors.
template <class W, class F>
void for_each_weight(W& w, F&& f) {
  using Fam = AttnFamily;
  auto each = [&](Fam fam, auto& v) {
    for (std::size_t h = 0; h < v.size(); ++h) f(fam, static_cast<int>(h), v[h]);
  };
  if constexpr (requires { w.wq; }) {
    each(Fam::kWq, w.wq);
    each(Fam::kWk, w.wk);
    each(Fam::kWv, w.wv);
    f(Fam::kWo, -1, w.wo);
  } else {
    f(Fam::kDq, -1, w.w_dq);
    f(Fam::kDkv, -1, w.w_dkv);
    f(Fam::kKr, -1, w.w_kr);
    each(Fam::kUq, w.w_uq);
    each(Fam::kQr, w.w_qr);
    each(Fam::kUk, w.w_uk);
    each(Fam::kUv, w.w_uv);
    f(Fam::kWo, -1, w.wo);
  }
  each(Fam::kQGain, w.q_gain);
  each(Fam::kKGain, w.k_gain);
}

// Builds a weight set of another element type, mapping each tensor through
// f(family, head, const T&) in for_each_weight order.
template <class U, template <class> class WT, class T, class F>
WT<U> map_weights(const WT<T>& w, F&& f) {
  WT<U> out;
  auto each = [&](AttnFamily fam, const std::vector<T>& src, std::vector<U>& dst) {
    dst.reserve(src.size());
    for (std::size_t h = 0; h < src.size(); ++h) dst.push_back(f(fam, static_cast<int>(h), src[h]));
  };
  if constexpr (requires { w.wq; }) {
    each(AttnFamily::kWq, w.wq, out.wq);
    each(AttnFamily::kWk, w.wk, out.wk);
    each(AttnFamily::kWv, w.wv, out.wv);
    out.wo = f(AttnFamily::kWo, -1, w.wo);
  } else {
    out.w_dq = f(AttnFamily::kDq, -1, w.w_dq);
    out.w_dkv = f(AttnFamily::kDkv, -1, w.w_dkv);
    out.w_kr = f(AttnFamily::kKr, -1, w.w_kr);
    each(AttnFamily::kUq, w.w_uq, out.w_uq);
    each(AttnFamily::kQr, w.w_qr, out.w_qr);
    each(AttnFamily::kUk, w.w_uk, out.w_uk);
    each(AttnFamily::kUv, w.w_uv, out.w_uv);
    out.wo = f(AttnFamily::kWo, -1, w.wo);
  }
  each(AttnFamily::kQGain, w.q_gain, out.q_gain);
  each(AttnFamily::kKGain, w.k_gain, out.k_gain);
  return out;
}

// Gaussian init with std 1/sqrt(fan_in) for every matrix; QK-norm gains at 1.
MhaWeights init_mha_weights(const AttentionConfig& cfg, std::mt19937_64& rng);
MlaWeights init_mla_weights(const AttentionConfig& cfg, std::mt19937_64& rng);

struct AttentionOutput {
  Var out;
  // Largest scaled, unmasked pre-softmax logit per head (when tracking).
  std::vector<double> max_logit;
};

// x holds batch * seq_len rows, grouped by sequence; positions restart at 0 for
// every sequence.
AttentionOutput mha_forward(const Var& x, const MhaVars& w, const AttentionConfig& cfg, std::size_t seq_len);
AttentionOutput mla_forward(const Var& x, const MlaVars& w, const AttentionConfig& cfg, std::size_t seq_len);

// Scaled logits of one head for a single sequence: rows of xq are queries at
// positions 0.., rows of xk keys at positions 0... No masking is applied.
Var mha_logits(const Var& xq, const Var& xk, const MhaVars& w, const AttentionConfig& cfg, std::size_t head);
Var mla_logits(const Var& xq, const Var& xk, const MlaVars& w, const AttentionConfig& cfg, std::size_t head);

// Plain-tensor conveniences evaluated without a differentiation record.
Tensor mha_logits(const Tensor& xq, const Tensor& xk, const MhaWeights& w, const AttentionConfig& cfg,
                  std::size_t head);
Tensor mla_logits(const Tensor& xq, const Tensor& xk, const MlaWeights& w, const AttentionConfig& cfg,
                  std::size_t head);

struct ForwardResult {
  Tensor out;
  std::vector<double> max_logit;
};
ForwardResult mha_forward(const Tensor& x, const MhaWeights& w, const AttentionConfig& cfg);
ForwardResult mla_forward(const Tensor& x, const MlaWeights& w, const AttentionConfig& cfg);

// Scaled, unmasked logits of one head for every sequence of x (batch * seq_len
// rows), evaluated along the same arithmetic path as the forward pass.
std::vector<Tensor> mha_sequence_logits(const Tensor& x, const MhaWeights& w, const AttentionConfig& cfg,
                                        std::size_t seq_len, std::size_t head);
std::vector<Tensor> mla_sequence_logits(const Tensor& x, const MlaWeights& w, const AttentionConfig& cfg,
                                        std::size_t seq_len, std::size_t head);

// Query and key rows of one head as they enter the dot product (after QK
// norm and rope), for every row of x.
struct HeadRows {
  Tensor q, k;
};
HeadRows mha_head_rows(const Tensor& x, const MhaWeights& w, const AttentionConfig& cfg, std::size_t seq_len,
                       std::size_t head);
HeadRows mla_head_rows(const Tensor& x, const MlaWeights& w, const AttentionConfig& cfg, std::size_t seq_len,
                       std::size_t head);

// Largest logit over the entries a causal (or full) mask keeps.
double masked_max(const Tensor& logits, bool causal);

// MLA logits split into the non-positional and rotary contributions, each
// already scaled by 1/sqrt(d_head); the logits are nope + rope. Requires
// qk_norm off (normalization couples the two parts).
struct MlaLogitParts {
  Tensor nope;
  Tensor rope;
};
MlaLogitParts mla_logit_parts(const Tensor& x, const MlaWeights& w, const AttentionConfig& cfg, std::size_t head);

// Per-token key-side latents cached at inference time: c_kv and the already
// rotated shared rope key.
struct MlaKvCache {
  Tensor ckv;    // seq x d_ckv
  Tensor krope;  // seq x d_rope
};
MlaKvCache mla_kv_cache(const Tensor& x, const MlaWeights& w, const AttentionConfig& cfg);

// Logit between a query token x at query_position and one cached key, using
// the absorbed d_cq x d_ckv matrix W_uq^h (W_uk^h)^T so k_nope is never formed.
double mla_absorbed_logit(std::span<const double> x, std::span<const double> ckv, std::span<const double> krope,
                          const MlaWeights& w, const AttentionConfig& cfg, std::size_t head,
                          std::size_t query_position);

}  // namespace quack
