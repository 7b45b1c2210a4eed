#pragma once

#include <cstddef>
#include <map>
#include <string>

#include "quack/autodiff.hpp"
#include "quack/model.hpp"
#include "quack/tensor.hpp"

namespace quack {

// Parameter name -> learning rate for one optimizer step.
using LrMap = std::map<std::string, double>;

struct Schedule {
  double base_lr = 3e-3;
  std::size_t warmup_steps = 50;

  // Linear ramp base_lr * (step + 1) / warmup_steps, then constant.
  double lr_at(std::size_t step) const;
};

struct MuonConfig {
  double momentum = 0.95;
  bool nesterov = true;
  int ns_steps = 5;
  // Cubic Newton-Schulz iterations run after the quintic ones. The quintic
  // coefficients only bring singular values into a band around 1; the cubic
  // steps converge them to 1 without overshoot.
  int ns_polish_steps = 5;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
};

struct OptimizerConfig {
  MuonConfig muon;
  AdamConfig adam;
};

// Approximate polar factor U V^T of g after a Frobenius prescale.
Tensor newton_schulz(const Tensor& g, int quintic_steps = 5, int polish_steps = 5);

struct ParamState {
  Tensor m;  // Muon momentum buffer or Adam first moment
  Tensor v;  // Adam second moment
  std::size_t steps = 0;
};

// Both return the Frobenius norm of the conditioned update G, where the
// parameter moves by -lr * G.
double muon_step(Tensor& param, const Tensor& grad, ParamState& state, double lr, const MuonConfig& cfg = {});
double adam_step(Tensor& param, const Tensor& grad, ParamState& state, double lr, const AdamConfig& cfg = {});

struct StepReport {
  std::map<std::string, double> update_norm;  // ||G||_F per parameter
};

class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg = {}) : cfg_(cfg) {}

  // One step over every parameter, each at lrs.at(name). Throws ConfigError
  // naming the first parameter without a learning rate or gradient.
  StepReport apply_step(ModelParams& params, const GradMap& grads, const LrMap& lrs);

  std::size_t step_count() const noexcept { return steps_; }
  const ParamState* state(const std::string& name) const;
  const OptimizerConfig& config() const noexcept { return cfg_; }

 private:
  OptimizerConfig cfg_;
  std::map<std::string, ParamState> states_;
  std::size_t steps_ = 0;
};

// Every parameter at the same rate.
LrMap uniform_lrs(const ModelParams& params, double lr);

}  // namespace quack
