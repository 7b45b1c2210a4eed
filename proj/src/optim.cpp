#include "quack/optim.hpp"

#include <cmath>

#include "quack/errors.hpp"
#include "quack/linalg.hpp"

namespace quack {

double Schedule::lr_at(std::size_t step) const {
  if (step >= warmup_steps) return base_lr;
  return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
}

Tensor newton_schulz(const Tensor& g, int quintic_steps, int polish_steps) {
  if (g.rank() != 2) throw DimensionError("newton_schulz: expected a matrix, got " + shape_string(g.shape()));
  const double norm = frobenius_norm(g);
  if (norm == 0.0) return Tensor(g.shape(), g.precision());

  const bool tall = g.rows() > g.cols();
  Tensor x = scaled(tall ? transpose(g) : g, 1.0 / norm);
  x.set_precision(Precision::kDouble);

  constexpr double a = 3.4445, b = -4.7750, c = 2.0315;
  for (int i = 0; i < quintic_steps; ++i) {
    const Tensor gram = matmul_nt(x, x);
    const Tensor poly = add(scaled(gram, b), scaled(matmul(gram, gram), c));
    x = add(scaled(x, a), matmul(poly, x));
  }
  for (int i = 0; i < polish_steps; ++i) {
    const Tensor gram = matmul_nt(x, x);
    x = sub(scaled(x, 1.5), scaled(matmul(gram, x), 0.5));
  }
  if (tall) x = transpose(x);
  x.set_precision(g.precision());
  return x;
}

namespace {

void require_same_shape(const Tensor& param, const Tensor& grad, const char* op) {
  if (param.shape() != grad.shape())
    throw DimensionError(std::string(op) + ": gradient " + shape_string(grad.shape()) + " for parameter " +
                         shape_string(param.shape()));
}

void ensure_buffer(Tensor& buf, const Tensor& like) {
  if (buf.shape() != like.shape()) buf = Tensor(like.shape());
}

}  // namespace

double muon_step(Tensor& param, const Tensor& grad, ParamState& state, double lr, const MuonConfig& cfg) {
  if (param.rank() != 2)
    throw ConfigError("muon_step: parameter of shape " + shape_string(param.shape()) +
                      " is not a matrix; route it to Adam");
  require_same_shape(param, grad, "muon_step");
  ensure_buffer(state.m, param);
  ++state.steps;

  auto& m = state.m.storage();
  Tensor dir(param.shape());
  for (std::size_t i = 0; i < m.size(); ++i) {
    m[i] = cfg.momentum * m[i] + grad[i];
    dir[i] = cfg.nesterov ? grad[i] + cfg.momentum * m[i] : m[i];
  }
  const Tensor update = newton_schulz(dir, cfg.ns_steps, cfg.ns_polish_steps);
  for (std::size_t i = 0; i < param.size(); ++i) param[i] -= lr * update[i];
  param.round_to_precision();
  return frobenius_norm(update);
}

double adam_step(Tensor& param, const Tensor& grad, ParamState& state, double lr, const AdamConfig& cfg) {
  require_same_shape(param, grad, "adam_step");
  ensure_buffer(state.m, param);
  ensure_buffer(state.v, param);
  ++state.steps;

  const double t = static_cast<double>(state.steps);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  auto& m = state.m.storage();
  auto& v = state.v.storage();
  double sq = 0.0;
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double u = (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
    param[i] -= lr * u;
    sq += u * u;
  }
  param.round_to_precision();
  return std::sqrt(sq);
}

StepReport Optimizer::apply_step(ModelParams& params, const GradMap& grads, const LrMap& lrs) {
  // Validate up front so a bad map leaves the parameters untouched.
  for_each_param(params, [&](const ParamInfo& info, const Tensor&) {
    if (!lrs.count(info.name)) throw ConfigError("no learning rate for parameter " + info.name);
    if (!grads.count(info.name)) throw ConfigError("no gradient for parameter " + info.name);
  });

  StepReport report;
  for_each_param(params, [&](const ParamInfo& info, Tensor& p) {
    ParamState& st = states_[info.name];
    const Tensor& g = grads.at(info.name);
    const double lr = lrs.at(info.name);
    report.update_norm[info.name] = info.route == OptimizerRoute::kMuon ? muon_step(p, g, st, lr, cfg_.muon)
                                                                        : adam_step(p, g, st, lr, cfg_.adam);
  });
  ++steps_;
  return report;
}

const ParamState* Optimizer::state(const std::string& name) const {
  auto it = states_.find(name);
  return it == states_.end() ? nullptr : &it->second;
}

LrMap uniform_lrs(const ModelParams& params, double lr) {
  LrMap out;
  for_each_param(params, [&](const ParamInfo& info, const Tensor&) { out[info.name] = lr; });
  return out;
}

}  // namespace quack
