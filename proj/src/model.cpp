#include "quack/model.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "quack/errors.hpp"
#include "quack/linalg.hpp"
#include "quack/text.hpp"

namespace quack {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (vocab_size < 2) fail("vocab_size must be at least 2");
  if (d_model == 0 || d_ff == 0 || n_layer == 0) fail("d_model, d_ff and n_layer must be positive");
  if (context_length < 2) fail("context_length must be at least 2");
  if (attention.d_model != d_model) fail("attention.d_model must equal d_model");
  attention.validate();
}

std::vector<std::pair<std::string, std::string>> model_config_entries(const ModelConfig& cfg) {
  const AttentionConfig& a = cfg.attention;
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  auto n = [](std::size_t v) { return std::to_string(v); };
  return {
      {"vocab_size", n(cfg.vocab_size)},
      {"d_model", n(cfg.d_model)},
      {"d_ff", n(cfg.d_ff)},
      {"n_layer", n(cfg.n_layer)},
      {"context_length", n(cfg.context_length)},
      {"tie_embeddings", b(cfg.tie_embeddings)},
      {"precision", cfg.precision == Precision::kSingle ? "single" : "double"},
      {"attention", std::string(to_string(a.variant))},
      {"n_head", n(a.n_head)},
      {"d_head", n(a.d_head)},
      {"d_nope", n(a.d_nope)},
      {"d_rope", n(a.d_rope)},
      {"d_cq", n(a.d_cq)},
      {"d_ckv", n(a.d_ckv)},
      {"qk_norm", b(a.qk_norm)},
      {"causal", b(a.causal)},
      {"rope", b(a.mha_rope)},
      {"rope_base", text::format_double(a.rope_base)},
      {"norm_eps", text::format_double(a.norm_eps)},
  };
}

bool apply_model_config_entry(ModelConfig& cfg, const std::string& key, const std::string& value) {
  AttentionConfig& a = cfg.attention;
  try {
    auto size = [&] {
      const long long v = text::parse_int(value);
      if (v <= 0) throw ConfigError(key + " must be positive");
      return static_cast<std::size_t>(v);
    };
    if (key == "vocab_size") cfg.vocab_size = size();
    else if (key == "d_model") cfg.d_model = a.d_model = size();
    else if (key == "d_ff") cfg.d_ff = size();
    else if (key == "n_layer") cfg.n_layer = size();
    else if (key == "context_length") cfg.context_length = size();
    else if (key == "tie_embeddings") cfg.tie_embeddings = text::parse_bool(value);
    else if (key == "precision") {
      if (value == "double") cfg.precision = Precision::kDouble;
      else if (value == "single") cfg.precision = Precision::kSingle;
      else throw ConfigError("precision must be double|single");
    } else if (key == "attention") a.variant = parse_attention_variant(value);
    else if (key == "n_head") a.n_head = size();
    else if (key == "d_head") a.d_head = size();
    else if (key == "d_nope") a.d_nope = size();
    else if (key == "d_rope") a.d_rope = size();
    else if (key == "d_cq") a.d_cq = size();
    else if (key == "d_ckv") a.d_ckv = size();
    else if (key == "qk_norm") a.qk_norm = text::parse_bool(value);
    else if (key == "causal") a.causal = text::parse_bool(value);
    else if (key == "rope") a.mha_rope = text::parse_bool(value);
    else if (key == "rope_base") a.rope_base = text::parse_double(value);
    else if (key == "norm_eps") a.norm_eps = text::parse_double(value);
    else return false;
  } catch (const std::invalid_argument& e) {
    if (dynamic_cast<const ConfigError*>(&e)) throw;
    throw ConfigError("bad value for " + key + ": " + e.what());
  }
  return true;
}

std::string attn_param_name(int layer, AttnFamily family, int head) {
  std::string name = "layers." + std::to_string(layer) + ".attn." + std::string(family_name(family));
  if (head >= 0) name += "." + std::to_string(head);
  return name;
}

std::vector<ParamInfo> param_infos(const ModelParams& params) {
  std::vector<ParamInfo> out;
  for_each_param(params, [&](const ParamInfo& info, const Tensor&) { out.push_back(info); });
  return out;
}

std::size_t param_count(const ModelParams& params) {
  std::size_t n = 0;
  for_each_param(params, [&](const ParamInfo&, const Tensor& t) { n += t.size(); });
  return n;
}

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const double embed_std = 1.0 / static_cast<double>(cfg.d_model);
  auto matrix = [&](std::size_t rows, std::size_t cols) {
    return Tensor::randn({rows, cols}, rng, 1.0 / std::sqrt(static_cast<double>(rows)));
  };

  ModelParams p;
  p.embed = Tensor::randn({cfg.vocab_size, cfg.d_model}, rng, embed_std);
  if (!cfg.tie_embeddings) p.unembed = Tensor::randn({cfg.d_model, cfg.vocab_size}, rng, embed_std);
  for (std::size_t l = 0; l < cfg.n_layer; ++l) {
    LayerParamsT<Tensor> layer;
    layer.attn_gain = Tensor::filled({cfg.d_model}, 1.0);
    if (cfg.attention.variant == AttentionVariant::kMha) layer.attn = init_mha_weights(cfg.attention, rng);
    else layer.attn = init_mla_weights(cfg.attention, rng);
    layer.mlp_gain = Tensor::filled({cfg.d_model}, 1.0);
    layer.mlp.w_gate = matrix(cfg.d_model, cfg.d_ff);
    layer.mlp.w_up = matrix(cfg.d_model, cfg.d_ff);
    layer.mlp.w_down = matrix(cfg.d_ff, cfg.d_model);
    p.layers.push_back(std::move(layer));
  }
  p.final_gain = Tensor::filled({cfg.d_model}, 1.0);
  if (cfg.precision == Precision::kSingle) {
    for_each_param(p, [](const ParamInfo&, Tensor& t) { t.set_precision(Precision::kSingle); });
  }
  return p;
}

ModelVars bind_params(Tape& tape, const ModelParams& params) {
  ModelVars v;
  v.embed = tape.leaf(params.embed, "embed");
  if (params.unembed) v.unembed = tape.leaf(*params.unembed, "unembed");
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& src = params.layers[l];
    const int li = static_cast<int>(l);
    const std::string prefix = "layers." + std::to_string(l) + ".";
    LayerParamsT<Var> layer;
    layer.attn_gain = tape.leaf(src.attn_gain, prefix + "attn_norm");
    std::visit(
        [&](const auto& w) {
          layer.attn = map_weights<Var>(w, [&](AttnFamily fam, int head, const Tensor& t) {
            return tape.leaf(t, attn_param_name(li, fam, head));
          });
        },
        src.attn);
    layer.mlp_gain = tape.leaf(src.mlp_gain, prefix + "mlp_norm");
    layer.mlp.w_gate = tape.leaf(src.mlp.w_gate, prefix + "mlp.gate");
    layer.mlp.w_up = tape.leaf(src.mlp.w_up, prefix + "mlp.up");
    layer.mlp.w_down = tape.leaf(src.mlp.w_down, prefix + "mlp.down");
    v.layers.push_back(std::move(layer));
  }
  v.final_gain = tape.leaf(params.final_gain, "final_norm");
  return v;
}

LossOutput forward_loss(const ModelVars& params, const ModelConfig& cfg, const TokenBatch& batch,
                        ForwardTrace* trace) {
  if (batch.seq < 2) throw DimensionError("forward_loss: sequences need at least 2 tokens");
  if (batch.seq > cfg.context_length)
    throw DimensionError("forward_loss: sequence length " + std::to_string(batch.seq) + " exceeds context length " +
                         std::to_string(cfg.context_length));
  if (batch.tokens.size() != batch.batch * batch.seq)
    throw DimensionError("forward_loss: token count does not match batch x seq");
  for (std::int32_t t : batch.tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size)
      throw VocabularyError("token " + std::to_string(t) + " outside vocabulary of size " +
                            std::to_string(cfg.vocab_size));
  }

  const double eps = cfg.attention.norm_eps;
  LossOutput out;
  Var x = embedding(params.embed, batch.tokens);
  if (trace) trace->attn_inputs.clear();
  for (const auto& layer : params.layers) {
    const Var h = rms_norm(x, layer.attn_gain, eps);
    if (trace) trace->attn_inputs.push_back(h.value());
    AttentionOutput attn = std::visit(
        [&](const auto& w) -> AttentionOutput {
          if constexpr (requires { w.wq; }) return mha_forward(h, w, cfg.attention, batch.seq);
          else return mla_forward(h, w, cfg.attention, batch.seq);
        },
        layer.attn);
    x = add(x, attn.out);
    out.max_logit.push_back(std::move(attn.max_logit));

    const Var h2 = rms_norm(x, layer.mlp_gain, eps);
    const Var gate = silu(matmul(h2, layer.mlp.w_gate));
    const Var up = matmul(h2, layer.mlp.w_up);
    x = add(x, matmul(mul(gate, up), layer.mlp.w_down));
  }
  const Var xf = rms_norm(x, params.final_gain, eps);
  const Var logits = params.unembed ? matmul(xf, *params.unembed) : matmul_nt(xf, params.embed);

  std::vector<std::int32_t> targets(batch.tokens.size(), kIgnoreTarget);
  for (std::size_t b = 0; b < batch.batch; ++b)
    for (std::size_t i = 0; i + 1 < batch.seq; ++i)
      targets[b * batch.seq + i] = batch.tokens[b * batch.seq + i + 1];
  out.loss = cross_entropy(logits, targets);
  return out;
}

LossAndGrads loss_and_grads(const ModelParams& params, const ModelConfig& cfg, const TokenBatch& batch,
                            ForwardTrace* trace) {
  Tape tape;
  const ModelVars vars = bind_params(tape, params);
  LossOutput lo = forward_loss(vars, cfg, batch, trace);
  LossAndGrads r;
  r.loss = lo.loss.value()[0];
  r.grads = tape.backward(lo.loss);
  r.max_logit = std::move(lo.max_logit);
  return r;
}

Evaluation evaluate(const ModelParams& params, const ModelConfig& cfg, const TokenBatch& batch) {
  Tape tape(Tape::Mode::kNoGrad);
  const ModelVars vars = bind_params(tape, params);
  Evaluation e;
  LossOutput lo = forward_loss(vars, cfg, batch, &e.trace);
  e.loss = lo.loss.value()[0];
  e.max_logit = std::move(lo.max_logit);
  return e;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr const char* kCheckpointMagic = "quacklab-checkpoint 1";
}

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const ModelParams& params) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  os << kCheckpointMagic << '\n';
  for (const auto& [k, v] : model_config_entries(cfg)) os << "config " << k << ' ' << v << '\n';
  for_each_param(params, [&](const ParamInfo& info, const Tensor& t) {
    os << "param " << info.name << ' ' << t.rank();
    for (std::size_t e : t.shape()) os << ' ' << e;
    os << '\n';
    for (std::size_t i = 0; i < t.size(); ++i) os << (i ? " " : "") << text::format_double(t[i]);
    os << '\n';
  });
  os << "end\n";
  if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

std::pair<ModelConfig, ModelParams> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != kCheckpointMagic) throw IoError("not a checkpoint file: " + path.string());

  ModelConfig cfg;
  std::map<std::string, Tensor> tensors;
  bool ended = false;
  while (std::getline(is, line)) {
    if (line == "end") {
      ended = true;
      break;
    }
    std::istringstream ls(line);
    std::string kind, name;
    ls >> kind >> name;
    if (kind == "config") {
      std::string value;
      ls >> value;
      if (!apply_model_config_entry(cfg, name, value)) throw IoError("unknown config key in checkpoint: " + name);
    } else if (kind == "param") {
      std::size_t rank = 0;
      ls >> rank;
      Shape shape(rank);
      for (auto& e : shape) ls >> e;
      std::string values;
      if (!ls || !std::getline(is, values)) throw IoError("truncated checkpoint at " + name);
      std::vector<double> data;
      for (const auto& tok : text::split(values, ' ')) data.push_back(text::parse_double(tok));
      tensors.emplace(name, Tensor(shape, std::move(data)));
    } else {
      throw IoError("malformed checkpoint line: " + line);
    }
  }
  if (!ended) throw IoError("checkpoint has no end marker: " + path.string());

  ModelParams params = init_params(cfg, 0);
  for_each_param(params, [&](const ParamInfo& info, Tensor& t) {
    auto it = tensors.find(info.name);
    if (it == tensors.end()) throw IoError("checkpoint lacks parameter " + info.name);
    if (it->second.shape() != t.shape()) throw IoError("shape mismatch for parameter " + info.name);
    const Precision p = t.precision();
    t = std::move(it->second);
    t.set_precision(p);
    tensors.erase(it);
  });
  if (!tensors.empty()) throw IoError("checkpoint has unexpected parameter " + tensors.begin()->first);
  return {cfg, std::move(params)};
}

}  // namespace quack
