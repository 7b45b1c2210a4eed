#include "quack/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "quack/errors.hpp"
#include "quack/linalg.hpp"

namespace quack {

std::string_view to_string(AttentionVariant v) { return v == AttentionVariant::kMha ? "mha" : "mla"; }

AttentionVariant parse_attention_variant(std::string_view text) {
  if (text == "mha") return AttentionVariant::kMha;
  if (text == "mla") return AttentionVariant::kMla;
  throw ConfigError("unknown attention variant '" + std::string(text) + "' (expected mha|mla)");
}

std::string_view family_name(AttnFamily f) {
  switch (f) {
    case AttnFamily::kWq: return "wq";
    case AttnFamily::kWk: return "wk";
    case AttnFamily::kWv: return "wv";
    case AttnFamily::kWo: return "wo";
    case AttnFamily::kQGain: return "q_gain";
    case AttnFamily::kKGain: return "k_gain";
    case AttnFamily::kDq: return "w_dq";
    case AttnFamily::kDkv: return "w_dkv";
    case AttnFamily::kKr: return "w_kr";
    case AttnFamily::kUq: return "w_uq";
    case AttnFamily::kQr: return "w_qr";
    case AttnFamily::kUk: return "w_uk";
    case AttnFamily::kUv: return "w_uv";
  }
  return "?";
}

void AttentionConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("attention config: " + msg); };
  if (d_model == 0 || n_head == 0 || d_head == 0) fail("d_model, n_head and d_head must be positive");
  if (!(rope_base > 0.0)) fail("rope_base must be positive");
  if (!(norm_eps > 0.0)) fail("norm_eps must be positive");
  if (variant == AttentionVariant::kMha) {
    if (mha_rope && d_head % 2 != 0) fail("d_head must be even when RoPE is enabled");
  } else {
    if (d_nope == 0 || d_rope == 0 || d_cq == 0 || d_ckv == 0) fail("MLA dimensions must be positive");
    if (d_head != d_nope + d_rope) fail("MLA requires d_head = d_nope + d_rope");
    if (d_rope % 2 != 0) fail("d_rope must be even");
    if (d_cq > d_model || d_ckv > d_model) fail("MLA latent dimensions must not exceed d_model");
  }
}

double AttentionConfig::logit_scale() const { return 1.0 / std::sqrt(static_cast<double>(d_head)); }

namespace {

Tensor gaussian(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  return Tensor::randn({rows, cols}, rng, 1.0 / std::sqrt(static_cast<double>(rows)));
}

std::vector<std::size_t> positions_for(std::size_t rows, std::size_t seq_len) {
  if (seq_len == 0 || rows % seq_len != 0)
    throw DimensionError(std::to_string(rows) + " rows do not split into sequences of " + std::to_string(seq_len));
  std::vector<std::size_t> pos(rows);
  for (std::size_t i = 0; i < rows; ++i) pos[i] = i % seq_len;
  return pos;
}

std::vector<std::size_t> iota_positions(std::size_t n) {
  std::vector<std::size_t> pos(n);
  std::iota(pos.begin(), pos.end(), std::size_t{0});
  return pos;
}

struct QK {
  Var q, k;
};

QK mha_head_qk(const Var& xq, const Var& xk, const MhaVars& w, const AttentionConfig& cfg, std::size_t h,
               std::span<const std::size_t> pos_q, std::span<const std::size_t> pos_k) {
  Var q = matmul(xq, w.wq[h]);
  Var k = matmul(xk, w.wk[h]);
  if (cfg.qk_norm) {
    q = rms_norm(q, w.q_gain[h], cfg.norm_eps);
    k = rms_norm(k, w.k_gain[h], cfg.norm_eps);
  }
  if (cfg.mha_rope) {
    q = rope(q, pos_q, cfg.rope_base);
    k = rope(k, pos_k, cfg.rope_base);
  }
  return {q, k};
}

// Shared MLA latents for one set of query rows and one set of key rows.
struct MlaLatents {
  Var cq, ckv, krope;
};

MlaLatents mla_latents(const Var& xq, const Var& xk, const MlaVars& w, const AttentionConfig& cfg,
                       std::span<const std::size_t> pos_k) {
  return {matmul(xq, w.w_dq), matmul(xk, w.w_dkv), rope(matmul(xk, w.w_kr), pos_k, cfg.rope_base)};
}

QK mla_head_qk(const MlaLatents& lat, const MlaVars& w, const AttentionConfig& cfg, std::size_t h,
               std::span<const std::size_t> pos_q) {
  const Var q_nope = matmul(lat.cq, w.w_uq[h]);
  const Var q_rope = rope(matmul(lat.cq, w.w_qr[h]), pos_q, cfg.rope_base);
  const Var k_nope = matmul(lat.ckv, w.w_uk[h]);
  const Var qs[] = {q_nope, q_rope};
  const Var ks[] = {k_nope, lat.krope};
  Var q = concat_cols(qs);
  Var k = concat_cols(ks);
  if (cfg.qk_norm) {
    q = rms_norm(q, w.q_gain[h], cfg.norm_eps);
    k = rms_norm(k, w.k_gain[h], cfg.norm_eps);
  }
  return {q, k};
}

Var scaled_logits(const QK& qk, const AttentionConfig& cfg) {
  return scale(matmul_nt(qk.q, qk.k), cfg.logit_scale());
}

// Attention of every head over every sequence; qk_for(h) returns the full
// (all-rows) query/key pair of head h and v_for(h) its values.
template <class QkFn, class VFn>
AttentionOutput attend(const Var& x, const AttentionConfig& cfg, std::size_t seq_len, const Var& wo, QkFn&& qk_for,
                       VFn&& v_for) {
  const std::size_t n = x.rows();
  if (seq_len == 0 || n % seq_len != 0)
    throw DimensionError("attention: " + std::to_string(n) + " rows do not split into sequences of " +
                         std::to_string(seq_len));
  const std::size_t batch = n / seq_len;
  const Mask mask = cfg.causal ? Mask::causal(seq_len, seq_len) : Mask(seq_len, seq_len);

  AttentionOutput result;
  result.max_logit.assign(cfg.n_head, -std::numeric_limits<double>::infinity());
  std::vector<Var> heads;
  heads.reserve(cfg.n_head);
  for (std::size_t h = 0; h < cfg.n_head; ++h) {
    const QK qk = qk_for(h);
    const Var v = v_for(h);
    std::vector<Var> outs;
    outs.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t start = b * seq_len;
      const QK part{slice_rows(qk.q, start, seq_len), slice_rows(qk.k, start, seq_len)};
      const Var logits = scaled_logits(part, cfg);
      if (cfg.track_max_logit) {
        result.max_logit[h] = std::max(result.max_logit[h], masked_max(logits.value(), cfg.causal));
      }
      const Var probs = softmax_rows(logits, &mask);
      outs.push_back(matmul(probs, slice_rows(v, start, seq_len)));
    }
    heads.push_back(batch == 1 ? outs.front() : concat_rows(outs));
  }
  result.out = matmul(concat_cols(heads), wo);
  return result;
}

template <class W>
auto as_constants(Tape& tape, const W& w) {
  return map_weights<Var>(w, [&](AttnFamily, int, const Tensor& t) { return tape.constant(t); });
}

}  // namespace

double masked_max(const Tensor& logits, bool causal) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const std::size_t limit = causal ? std::min(logits.cols(), i + 1) : logits.cols();
    for (std::size_t j = 0; j < limit; ++j) mx = std::max(mx, logits(i, j));
  }
  return mx;
}

MhaWeights init_mha_weights(const AttentionConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  MhaWeights w;
  for (std::size_t h = 0; h < cfg.n_head; ++h) w.wq.push_back(gaussian(cfg.d_model, cfg.d_head, rng));
  for (std::size_t h = 0; h < cfg.n_head; ++h) w.wk.push_back(gaussian(cfg.d_model, cfg.d_head, rng));
  for (std::size_t h = 0; h < cfg.n_head; ++h) w.wv.push_back(gaussian(cfg.d_model, cfg.d_head, rng));
  w.wo = gaussian(cfg.n_head * cfg.d_head, cfg.d_model, rng);
  if (cfg.qk_norm) {
    w.q_gain.assign(cfg.n_head, Tensor::filled({cfg.d_head}, 1.0));
    w.k_gain.assign(cfg.n_head, Tensor::filled({cfg.d_head}, 1.0));
  }
  return w;
}

MlaWeights init_mla_weights(const AttentionConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  MlaWeights w;
  w.w_dq = gaussian(cfg.d_model, cfg.d_cq, rng);
  w.w_dkv = gaussian(cfg.d_model, cfg.d_ckv, rng);
  w.w_kr = gaussian(cfg.d_model, cfg.d_rope, rng);
  for (std::size_t h = 0; h < cfg.n_head; ++h) w.w_uq.push_back(gaussian(cfg.d_cq, cfg.d_nope, rng));
  for (std::size_t h = 0; h < cfg.n_head; ++h) w.w_qr.push_back(gaussian(cfg.d_cq, cfg.d_rope, rng));
  for (std::size_t h = 0; h < cfg.n_head; ++h) w.w_uk.push_back(gaussian(cfg.d_ckv, cfg.d_nope, rng));
  for (std::size_t h = 0; h < cfg.n_head; ++h) w.w_uv.push_back(gaussian(cfg.d_ckv, cfg.d_head, rng));
  w.wo = gaussian(cfg.n_head * cfg.d_head, cfg.d_model, rng);
  if (cfg.qk_norm) {
    w.q_gain.assign(cfg.n_head, Tensor::filled({cfg.d_head}, 1.0));
    w.k_gain.assign(cfg.n_head, Tensor::filled({cfg.d_head}, 1.0));
  }
  return w;
}

AttentionOutput mha_forward(const Var& x, const MhaVars& w, const AttentionConfig& cfg, std::size_t seq_len) {
  if (cfg.variant != AttentionVariant::kMha) throw ConfigError("mha_forward: config variant is not mha");
  if (x.cols() != cfg.d_model) throw DimensionError("mha_forward: input width " + shape_string(x.shape()));
  const auto pos = positions_for(x.rows(), seq_len);
  return attend(
      x, cfg, seq_len, w.wo, [&](std::size_t h) { return mha_head_qk(x, x, w, cfg, h, pos, pos); },
      [&](std::size_t h) { return matmul(x, w.wv[h]); });
}

AttentionOutput mla_forward(const Var& x, const MlaVars& w, const AttentionConfig& cfg, std::size_t seq_len) {
  if (cfg.variant != AttentionVariant::kMla) throw ConfigError("mla_forward: config variant is not mla");
  if (x.cols() != cfg.d_model) throw DimensionError("mla_forward: input width " + shape_string(x.shape()));
  const auto pos = positions_for(x.rows(), seq_len);
  const MlaLatents lat = mla_latents(x, x, w, cfg, pos);
  return attend(
      x, cfg, seq_len, w.wo, [&](std::size_t h) { return mla_head_qk(lat, w, cfg, h, pos); },
      [&](std::size_t h) { return matmul(lat.ckv, w.w_uv[h]); });
}

Var mha_logits(const Var& xq, const Var& xk, const MhaVars& w, const AttentionConfig& cfg, std::size_t head) {
  if (head >= cfg.n_head) throw DimensionError("mha_logits: head " + std::to_string(head) + " out of range");
  const auto pq = iota_positions(xq.rows());
  const auto pk = iota_positions(xk.rows());
  return scaled_logits(mha_head_qk(xq, xk, w, cfg, head, pq, pk), cfg);
}

Var mla_logits(const Var& xq, const Var& xk, const MlaVars& w, const AttentionConfig& cfg, std::size_t head) {
  if (head >= cfg.n_head) throw DimensionError("mla_logits: head " + std::to_string(head) + " out of range");
  const auto pq = iota_positions(xq.rows());
  const auto pk = iota_positions(xk.rows());
  return scaled_logits(mla_head_qk(mla_latents(xq, xk, w, cfg, pk), w, cfg, head, pq), cfg);
}

Tensor mha_logits(const Tensor& xq, const Tensor& xk, const MhaWeights& w, const AttentionConfig& cfg,
                  std::size_t head) {
  Tape tape(Tape::Mode::kNoGrad);
  return mha_logits(tape.constant(xq), tape.constant(xk), as_constants(tape, w), cfg, head).value();
}

Tensor mla_logits(const Tensor& xq, const Tensor& xk, const MlaWeights& w, const AttentionConfig& cfg,
                  std::size_t head) {
  Tape tape(Tape::Mode::kNoGrad);
  return mla_logits(tape.constant(xq), tape.constant(xk), as_constants(tape, w), cfg, head).value();
}

ForwardResult mha_forward(const Tensor& x, const MhaWeights& w, const AttentionConfig& cfg) {
  Tape tape(Tape::Mode::kNoGrad);
  AttentionOutput r = mha_forward(tape.constant(x), as_constants(tape, w), cfg, x.rows());
  return {r.out.value(), r.max_logit};
}

ForwardResult mla_forward(const Tensor& x, const MlaWeights& w, const AttentionConfig& cfg) {
  Tape tape(Tape::Mode::kNoGrad);
  AttentionOutput r = mla_forward(tape.constant(x), as_constants(tape, w), cfg, x.rows());
  return {r.out.value(), r.max_logit};
}

namespace {

std::vector<Tensor> per_sequence(const QK& qk, const AttentionConfig& cfg, std::size_t rows, std::size_t seq_len) {
  if (seq_len == 0 || rows % seq_len != 0)
    throw DimensionError("sequence_logits: " + std::to_string(rows) + " rows do not split into sequences of " +
                         std::to_string(seq_len));
  std::vector<Tensor> out;
  for (std::size_t start = 0; start < rows; start += seq_len) {
    const QK part{slice_rows(qk.q, start, seq_len), slice_rows(qk.k, start, seq_len)};
    out.push_back(scaled_logits(part, cfg).value());
  }
  return out;
}

}  // namespace

std::vector<Tensor> mha_sequence_logits(const Tensor& x, const MhaWeights& w, const AttentionConfig& cfg,
                                        std::size_t seq_len, std::size_t head) {
  if (head >= cfg.n_head) throw DimensionError("mha_sequence_logits: head out of range");
  Tape tape(Tape::Mode::kNoGrad);
  const Var xv = tape.constant(x);
  const auto pos = positions_for(x.rows(), seq_len);
  return per_sequence(mha_head_qk(xv, xv, as_constants(tape, w), cfg, head, pos, pos), cfg, x.rows(), seq_len);
}

std::vector<Tensor> mla_sequence_logits(const Tensor& x, const MlaWeights& w, const AttentionConfig& cfg,
                                        std::size_t seq_len, std::size_t head) {
  if (head >= cfg.n_head) throw DimensionError("mla_sequence_logits: head out of range");
  Tape tape(Tape::Mode::kNoGrad);
  const Var xv = tape.constant(x);
  const auto pos = positions_for(x.rows(), seq_len);
  const MlaVars wv = as_constants(tape, w);
  return per_sequence(mla_head_qk(mla_latents(xv, xv, wv, cfg, pos), wv, cfg, head, pos), cfg, x.rows(), seq_len);
}

HeadRows mha_head_rows(const Tensor& x, const MhaWeights& w, const AttentionConfig& cfg, std::size_t seq_len,
                       std::size_t head) {
  if (head >= cfg.n_head) throw DimensionError("mha_head_rows: head out of range");
  Tape tape(Tape::Mode::kNoGrad);
  const Var xv = tape.constant(x);
  const auto pos = positions_for(x.rows(), seq_len);
  const QK qk = mha_head_qk(xv, xv, as_constants(tape, w), cfg, head, pos, pos);
  return {qk.q.value(), qk.k.value()};
}

HeadRows mla_head_rows(const Tensor& x, const MlaWeights& w, const AttentionConfig& cfg, std::size_t seq_len,
                       std::size_t head) {
  if (head >= cfg.n_head) throw DimensionError("mla_head_rows: head out of range");
  Tape tape(Tape::Mode::kNoGrad);
  const Var xv = tape.constant(x);
  const auto pos = positions_for(x.rows(), seq_len);
  const MlaVars wv = as_constants(tape, w);
  const QK qk = mla_head_qk(mla_latents(xv, xv, wv, cfg, pos), wv, cfg, head, pos);
  return {qk.q.value(), qk.k.value()};
}

MlaLogitParts mla_logit_parts(const Tensor& x, const MlaWeights& w, const AttentionConfig& cfg, std::size_t head) {
  if (cfg.qk_norm) throw ConfigError("mla_logit_parts: undefined with qk_norm enabled");
  if (head >= cfg.n_head) throw DimensionError("mla_logit_parts: head out of range");
  const auto pos = iota_positions(x.rows());
  const Tensor cq = matmul(x, w.w_dq);
  const Tensor ckv = matmul(x, w.w_dkv);
  const Tensor q_nope = matmul(cq, w.w_uq[head]);
  const Tensor k_nope = matmul(ckv, w.w_uk[head]);
  const Tensor q_rope = rope(matmul(cq, w.w_qr[head]), pos, cfg.rope_base);
  const Tensor k_rope = rope(matmul(x, w.w_kr), pos, cfg.rope_base);
  return {scaled(matmul_nt(q_nope, k_nope), cfg.logit_scale()), scaled(matmul_nt(q_rope, k_rope), cfg.logit_scale())};
}

MlaKvCache mla_kv_cache(const Tensor& x, const MlaWeights& w, const AttentionConfig& cfg) {
  const auto pos = iota_positions(x.rows());
  return {matmul(x, w.w_dkv), rope(matmul(x, w.w_kr), pos, cfg.rope_base)};
}

double mla_absorbed_logit(std::span<const double> x, std::span<const double> ckv, std::span<const double> krope,
                          const MlaWeights& w, const AttentionConfig& cfg, std::size_t head,
                          std::size_t query_position) {
  if (cfg.qk_norm) throw ConfigError("mla_absorbed_logit: QK norm prevents weight absorption");
  if (head >= cfg.n_head) throw DimensionError("mla_absorbed_logit: head out of range");
  if (x.size() != cfg.d_model || ckv.size() != cfg.d_ckv || krope.size() != cfg.d_rope)
    throw DimensionError("mla_absorbed_logit: input lengths do not match the config");

  const Tensor xq({1, cfg.d_model}, std::vector<double>(x.begin(), x.end()));
  const Tensor cq = matmul(xq, w.w_dq);
  // absorbed (d_cq x d_ckv): the query latent meets the cached key latent directly
  const Tensor absorbed = matmul_nt(w.w_uq[head], w.w_uk[head]);
  const Tensor q_latent = matmul(cq, absorbed);
  const double nope = dot(q_latent.row(0), ckv);
  const std::size_t pos[] = {query_position};
  const Tensor q_rope = rope(matmul(cq, w.w_qr[head]), pos, cfg.rope_base);
  const double rot = dot(q_rope.row(0), krope);
  return (nope + rot) * cfg.logit_scale();
}

}  // namespace quack
