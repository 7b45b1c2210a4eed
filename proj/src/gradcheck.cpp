#include "quack/gradcheck.hpp"

#include <random>

#include "quack/attention.hpp"
#include "quack/model.hpp"

namespace quack {

namespace {

// Contracts an arbitrary output against a fixed random tensor so every output
// element contributes to the scalar.
Var contract(const Var& out, const Tensor& weights) {
  return sum(mul(out, out.tape->constant(weights)));
}

struct Battery {
  std::mt19937_64 rng;
  std::vector<GradCheckCase> cases;

  Tensor randn(Shape s, double std = 1.0) { return Tensor::randn(std::move(s), rng, std); }

  void check(std::string name, const std::vector<Tensor>& inputs, const ScalarFn& f) {
    GradCheckCase c;
    c.name = std::move(name);
    for (const auto& t : inputs) c.elements += t.size();
    c.report = grad_check(f, inputs);
    cases.push_back(std::move(c));
  }

  // y = op(inputs), scalar = <y, C> with C drawn once for the output shape.
  template <class Op>
  void unary_like(std::string name, const std::vector<Tensor>& inputs, Op op) {
    Tape probe(Tape::Mode::kNoGrad);
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(probe.constant(t));
    const Tensor weights = randn(op(std::span<const Var>(vars)).shape());
    check(std::move(name), inputs, [op, weights](Tape&, std::span<const Var> in) { return contract(op(in), weights); });
  }
};

template <class W>
std::vector<Tensor> flatten_weights(const W& w) {
  std::vector<Tensor> out;
  for_each_weight(w, [&](AttnFamily, int, const Tensor& t) { out.push_back(t); });
  return out;
}

template <class WV, class W>
WV vars_like(const W& w, std::span<const Var> in, std::size_t offset) {
  std::size_t i = offset;
  return map_weights<Var>(w, [&](AttnFamily, int, const Tensor&) { return in[i++]; });
}

AttentionConfig toy_attention(AttentionVariant variant, bool qk_norm, bool rope) {
  AttentionConfig a;
  a.variant = variant;
  a.d_model = 12;
  a.n_head = 2;
  a.d_head = 8;
  a.d_nope = 4;
  a.d_rope = 4;
  a.d_cq = 6;
  a.d_ckv = 6;
  a.qk_norm = qk_norm;
  a.mha_rope = rope;
  return a;
}

ModelConfig toy_model(AttentionVariant variant, bool tie) {
  ModelConfig m;
  m.vocab_size = 16;
  m.d_model = 16;
  m.d_ff = 32;
  m.n_layer = 2;
  m.context_length = 8;
  m.tie_embeddings = tie;
  m.attention = toy_attention(variant, false, true);
  m.attention.d_model = 16;
  m.attention.d_cq = 8;
  m.attention.d_ckv = 8;
  return m;
}

// Moves QK-norm gains away from 1 so their gradients are generic.
template <class W>
void perturb_gains(Battery& b, W& w) {
  for (auto* gains : {&w.q_gain, &w.k_gain})
    for (auto& g : *gains)
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += 0.2 * std::normal_distribution<double>()(b.rng);
}

void attention_case(Battery& b, const std::string& name, const AttentionConfig& cfg) {
  constexpr std::size_t kBatch = 2, kSeq = 5;
  const Tensor x = b.randn({kBatch * kSeq, cfg.d_model});
  std::vector<Tensor> inputs{x};
  const auto add_weights = [&](const auto& w) {
    auto ws = flatten_weights(w);
    inputs.insert(inputs.end(), ws.begin(), ws.end());
  };
  if (cfg.variant == AttentionVariant::kMha) {
    MhaWeights w = init_mha_weights(cfg, b.rng);
    perturb_gains(b, w);
    add_weights(w);
    b.unary_like(name, inputs, [cfg, w](std::span<const Var> in) {
      return mha_forward(in[0], vars_like<MhaVars>(w, in, 1), cfg, kSeq).out;
    });
  } else {
    MlaWeights w = init_mla_weights(cfg, b.rng);
    perturb_gains(b, w);
    add_weights(w);
    b.unary_like(name, inputs, [cfg, w](std::span<const Var> in) {
      return mla_forward(in[0], vars_like<MlaVars>(w, in, 1), cfg, kSeq).out;
    });
  }
}

void model_case(Battery& b, const std::string& name, const ModelConfig& cfg) {
  const ModelParams params = init_params(cfg, b.rng());
  std::vector<Tensor> inputs;
  for_each_param(params, [&](const ParamInfo&, const Tensor& t) { inputs.push_back(t); });
  TokenBatch batch{2, 6, {}};
  std::uniform_int_distribution<std::int32_t> tok(0, static_cast<std::int32_t>(cfg.vocab_size) - 1);
  for (std::size_t i = 0; i < batch.batch * batch.seq; ++i) batch.tokens.push_back(tok(b.rng));
  b.check(name, inputs, [cfg, params, batch](Tape& tape, std::span<const Var> in) {
    ModelVars vars = bind_params(tape, params);
    std::size_t i = 0;
    for_each_param(vars, [&](const ParamInfo&, Var& v) { v = in[i++]; });
    return forward_loss(vars, cfg, batch).loss;
  });
}

}  // namespace

std::vector<GradCheckCase> run_gradcheck_battery(std::uint64_t seed) {
  Battery b{std::mt19937_64(seed), {}};
  const auto m = [&](std::size_t r, std::size_t c) { return b.randn({r, c}); };

  b.unary_like("matmul", {m(3, 4), m(4, 5)}, [](std::span<const Var> in) { return matmul(in[0], in[1]); });
  b.unary_like("matmul_nt", {m(3, 4), m(5, 4)}, [](std::span<const Var> in) { return matmul_nt(in[0], in[1]); });
  b.unary_like("add", {m(3, 4), m(3, 4)}, [](std::span<const Var> in) { return add(in[0], in[1]); });
  b.unary_like("mul", {m(3, 4), m(3, 4)}, [](std::span<const Var> in) { return mul(in[0], in[1]); });
  b.unary_like("scale", {m(3, 4)}, [](std::span<const Var> in) { return scale(in[0], -1.7); });
  b.unary_like("silu", {m(3, 4)}, [](std::span<const Var> in) { return silu(in[0]); });
  b.check("sum", {m(3, 4)}, [](Tape&, std::span<const Var> in) { return sum(mul(in[0], in[0])); });
  b.unary_like("softmax_rows", {m(4, 6)}, [](std::span<const Var> in) { return softmax_rows(in[0]); });
  b.unary_like("softmax_rows_causal", {m(5, 5)}, [](std::span<const Var> in) {
    const Mask mask = Mask::causal(5, 5);
    return softmax_rows(in[0], &mask);
  });
  b.unary_like("rms_norm", {m(4, 6), b.randn({6})},
               [](std::span<const Var> in) { return rms_norm(in[0], in[1]); });
  b.unary_like("rope", {m(5, 8)}, [](std::span<const Var> in) {
    const std::vector<std::size_t> pos{0, 1, 2, 7, 30};
    return rope(in[0], pos);
  });
  b.unary_like("concat_cols", {m(3, 2), m(3, 4)}, [](std::span<const Var> in) { return concat_cols(in); });
  b.unary_like("concat_rows", {m(2, 3), m(4, 3)}, [](std::span<const Var> in) { return concat_rows(in); });
  b.unary_like("slice_rows", {m(6, 3)}, [](std::span<const Var> in) { return slice_rows(in[0], 1, 3); });
  b.unary_like("embedding", {m(7, 4)}, [](std::span<const Var> in) {
    const std::vector<std::int32_t> tokens{3, 0, 3, 6, 1};
    return embedding(in[0], tokens);
  });
  b.check("cross_entropy", {m(5, 7)}, [](Tape&, std::span<const Var> in) {
    const std::vector<std::int32_t> targets{2, kIgnoreTarget, 6, 0, 2};
    return cross_entropy(in[0], targets);
  });

  attention_case(b, "mha_attention", toy_attention(AttentionVariant::kMha, false, true));
  attention_case(b, "mha_attention_no_rope", toy_attention(AttentionVariant::kMha, false, false));
  attention_case(b, "mha_attention_qk_norm", toy_attention(AttentionVariant::kMha, true, true));
  attention_case(b, "mla_attention", toy_attention(AttentionVariant::kMla, false, true));
  attention_case(b, "mla_attention_qk_norm", toy_attention(AttentionVariant::kMla, true, true));

  model_case(b, "model_mha", toy_model(AttentionVariant::kMha, true));
  model_case(b, "model_mha_untied", toy_model(AttentionVariant::kMha, false));
  model_case(b, "model_mla", toy_model(AttentionVariant::kMla, true));
  return std::move(b.cases);
}

}  // namespace quack
