#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "quack/attention.hpp"
#include "quack/autodiff.hpp"
#include "quack/tensor.hpp"

namespace quack {

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t d_ff = 256;  // 4 * d_model
  std::size_t n_layer = 2;
  std::size_t context_length = 64;
  AttentionConfig attention;  // d_model and n_head mirror the model's
  bool tie_embeddings = true;
  Precision precision = Precision::kDouble;

  void validate() const;
};

// Flat key/value view of a ModelConfig, shared by checkpoints and run configs.
std::vector<std::pair<std::string, std::string>> model_config_entries(const ModelConfig& cfg);
// Returns false if the key is not a model key; throws ConfigError on a bad value.
bool apply_model_config_entry(ModelConfig& cfg, const std::string& key, const std::string& value);

template <class T>
struct MlpWeightsT {
  T w_gate, w_up;  // d_model x d_ff
  T w_down;        // d_ff x d_model
};

template <class T>
struct LayerParamsT {
  T attn_gain;
  std::variant<MhaWeightsT<T>, MlaWeightsT<T>> attn;
  T mlp_gain;
  MlpWeightsT<T> mlp;
};

template <class T>
struct ModelParamsT {
  T embed;                   // vocab x d_model
  std::optional<T> unembed;  // d_model x vocab, only when embeddings are untied
  std::vector<LayerParamsT<T>> layers;
  T final_gain;
};

using ModelParams = ModelParamsT<Tensor>;
using ModelVars = ModelParamsT<Var>;

// Muon takes the 2-D weights inside blocks; Adam everything else.
enum class OptimizerRoute { kMuon, kAdam };

struct ParamInfo {
  std::string name;
  OptimizerRoute route = OptimizerRoute::kAdam;
  int layer = -1;
  int head = -1;
  std::optional<AttnFamily> family;  // set for attention parameters
};

std::string attn_param_name(int layer, AttnFamily family, int head);

inline ParamInfo plain_param(std::string name, OptimizerRoute route, int layer = -1) {
  ParamInfo info;
  info.name = std::move(name);
  info.route = route;
  info.layer = layer;
  return info;
}

// Visits every parameter in a fixed order as f(const ParamInfo&, T&).
template <class P, class F>
void for_each_param(P& params, F&& f) {
  f(plain_param("embed", OptimizerRoute::kAdam), params.embed);
  if (params.unembed) f(plain_param("unembed", OptimizerRoute::kAdam), *params.unembed);
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto& layer = params.layers[l];
    const int li = static_cast<int>(l);
    const std::string prefix = "layers." + std::to_string(l) + ".";
    f(plain_param(prefix + "attn_norm", OptimizerRoute::kAdam, li), layer.attn_gain);
    std::visit(
        [&](auto& w) {
          for_each_weight(w, [&](AttnFamily fam, int head, auto& t) {
            const bool gain = fam == AttnFamily::kQGain || fam == AttnFamily::kKGain;
            f(ParamInfo{attn_param_name(li, fam, head), gain ? OptimizerRoute::kAdam : OptimizerRoute::kMuon, li,
                        head, fam},
              t);
          });
        },
        layer.attn);
    f(plain_param(prefix + "mlp_norm", OptimizerRoute::kAdam, li), layer.mlp_gain);
    f(plain_param(prefix + "mlp.gate", OptimizerRoute::kMuon, li), layer.mlp.w_gate);
    f(plain_param(prefix + "mlp.up", OptimizerRoute::kMuon, li), layer.mlp.w_up);
    f(plain_param(prefix + "mlp.down", OptimizerRoute::kMuon, li), layer.mlp.w_down);
  }
  f(plain_param("final_norm", OptimizerRoute::kAdam), params.final_gain);
}

std::vector<ParamInfo> param_infos(const ModelParams& params);
std::size_t param_count(const ModelParams& params);

// Deterministic init: matrices N(0, 1/fan_in), embeddings N(0, 1/d_model^2),
// gains 1.
ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);

// Token ids of `batch` sequences of `seq` tokens each, row-major.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> tokens;
};

// Normalized attention inputs of each layer, captured during a forward pass.
struct ForwardTrace {
  std::vector<Tensor> attn_inputs;  // per layer, (batch * seq) x d_model
};

struct LossOutput {
  Var loss;
  std::vector<std::vector<double>> max_logit;  // [layer][head]
};

ModelVars bind_params(Tape& tape, const ModelParams& params);

// Mean next-token cross-entropy over the batch (positions 0..seq-2 predict
// 1..seq-1).
LossOutput forward_loss(const ModelVars& params, const ModelConfig& cfg, const TokenBatch& batch,
                        ForwardTrace* trace = nullptr);

struct LossAndGrads {
  double loss = 0.0;
  GradMap grads;
  std::vector<std::vector<double>> max_logit;
};
LossAndGrads loss_and_grads(const ModelParams& params, const ModelConfig& cfg, const TokenBatch& batch,
                            ForwardTrace* trace = nullptr);

// Evaluation without a differentiation record.
struct Evaluation {
  double loss = 0.0;
  std::vector<std::vector<double>> max_logit;
  ForwardTrace trace;
};
Evaluation evaluate(const ModelParams& params, const ModelConfig& cfg, const TokenBatch& batch);

// Text checkpoint: header, config entries, then every parameter with its
// shape and shortest round-trip values. Round-trips exactly.
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const ModelParams& params);
std::pair<ModelConfig, ModelParams> load_checkpoint(const std::filesystem::path& path);

}  // namespace quack
