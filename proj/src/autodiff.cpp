#include "quack/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "quack/errors.hpp"
#include "quack/linalg.hpp"

namespace quack {

const Tensor& Var::value() const { return tape->value(*this); }

Mask::Mask(std::size_t rows, std::size_t cols, bool keep)
    : rows_(rows), cols_(cols), keep_(rows * cols, keep ? 1 : 0) {}

Mask Mask::causal(std::size_t rows, std::size_t cols, std::size_t offset) {
  Mask m(rows, cols, false);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols && j <= i + offset; ++j) m.set(i, j, true);
  return m;
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::leaf(Tensor value, std::string name) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = recording();
  n.name = std::move(name);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  bool single = false, needs_grad = false;
  for (const Var& in : inputs) {
    if (in.tape != this) throw std::logic_error("operand belongs to a different tape");
    single = single || nodes_[in.id].value.precision() == Precision::kSingle;
    needs_grad = needs_grad || nodes_[in.id].requires_grad;
  }
  if (single) value.set_precision(Precision::kSingle);
  Node n;
  n.value = std::move(value);
  if (recording() && needs_grad) {
    n.requires_grad = true;
    n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

void Tape::accumulate(const Var& v, const Tensor& g) {
  Node& n = nodes_[v.id];
  if (!n.requires_grad) return;
  if (g.size() != n.value.size())
    throw DimensionError("gradient shape " + shape_string(g.shape()) + " does not match value " +
                         shape_string(n.value.shape()));
  if (n.grad.empty()) {
    n.grad = Tensor(n.value.shape(), std::vector<double>(g.data().begin(), g.data().end()));
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

GradMap Tape::backward(const Var& loss) {
  if (loss.tape != this) throw std::logic_error("backward: loss is not on this tape");
  if (nodes_[loss.id].value.size() != 1)
    throw DimensionError("backward: loss must be scalar, got " + shape_string(nodes_[loss.id].value.shape()));
  for (Node& n : nodes_) n.grad = Tensor();
  if (!nodes_[loss.id].requires_grad) return {};
  nodes_[loss.id].grad = Tensor(nodes_[loss.id].value.shape(), std::vector<double>{1.0});
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty() || !n.backward) continue;
    n.backward(*this, n.grad);
  }
  GradMap grads;
  for (const Node& n : nodes_) {
    if (n.name.empty() || !n.requires_grad) continue;
    grads[n.name] = n.grad.empty() ? Tensor(n.value.shape()) : n.grad;
  }
  return grads;
}

Tensor Tape::grad(const Var& v) const {
  const Node& n = nodes_[v.id];
  return n.grad.empty() ? Tensor(n.value.shape()) : n.grad;
}

// ---------------------------------------------------------------------------
// Plain kernels shared by the differentiable ops

Tensor softmax_rows(const Tensor& x, const Mask* mask) {
  const std::size_t m = x.rows(), n = x.cols();
  if (mask && (mask->rows() != m || mask->cols() != n))
    throw DimensionError("softmax_rows: mask " + std::to_string(mask->rows()) + "x" +
                         std::to_string(mask->cols()) + " vs input " + shape_string(x.shape()));
  Tensor y(x.shape());
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && !(*mask)(i, j)) continue;
      any = true;
      mx = std::max(mx, x(i, j));
    }
    if (!any) throw DegenerateRowError("softmax_rows: row " + std::to_string(i) + " is fully masked");
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && !(*mask)(i, j)) continue;
      const double e = std::exp(x(i, j) - mx);
      y(i, j) = e;
      z += e;
    }
    for (std::size_t j = 0; j < n; ++j) y(i, j) /= z;
  }
  y.set_precision(x.precision());
  return y;
}

namespace {

// 1 / max(rms(x), eps): rows above eps come out with RMS exactly 1.
double inv_rms(std::span<const double> x, double eps) {
  return 1.0 / std::max(std::sqrt(dot(x, x) / static_cast<double>(x.size())), eps);
}

}  // namespace

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
  if (!(eps > 0.0)) throw ConfigError("rms_norm: eps must be positive");
  const std::size_t m = x.rows(), d = x.cols();
  if (gain.size() != d)
    throw DimensionError("rms_norm: gain " + shape_string(gain.shape()) + " vs input " + shape_string(x.shape()));
  Tensor y(x.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const auto xi = x.row(i);
    const double r = inv_rms(xi, eps);
    auto yi = y.row(i);
    for (std::size_t j = 0; j < d; ++j) yi[j] = xi[j] * r * gain[j];
  }
  y.set_precision(x.precision());
  return y;
}

namespace {

void rope_rotate(const Tensor& x, Tensor& y, std::span<const std::size_t> positions, double theta_base,
                 bool inverse) {
  const std::size_t m = x.rows(), d = x.cols();
  for (std::size_t r = 0; r < m; ++r) {
    const auto xr = x.row(r);
    auto yr = y.row(r);
    const double pos = static_cast<double>(positions[r]);
    for (std::size_t i = 0; i < d / 2; ++i) {
      const double freq = std::pow(theta_base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      const double angle = pos * freq;
      const double c = std::cos(angle), s = inverse ? -std::sin(angle) : std::sin(angle);
      const double a = xr[2 * i], b = xr[2 * i + 1];
      yr[2 * i] = a * c - b * s;
      yr[2 * i + 1] = a * s + b * c;
    }
  }
}

void check_rope(const Tensor& x, std::span<const std::size_t> positions, double theta_base) {
  if (x.cols() % 2 != 0) throw DimensionError("rope: last extent must be even, got " + shape_string(x.shape()));
  if (positions.size() != x.rows())
    throw DimensionError("rope: " + std::to_string(positions.size()) + " positions for " +
                         std::to_string(x.rows()) + " rows");
  if (!(theta_base > 0.0)) throw ConfigError("rope: theta_base must be positive");
}

}  // namespace

Tensor rope(const Tensor& x, std::span<const std::size_t> positions, double theta_base) {
  check_rope(x, positions, theta_base);
  Tensor y(x.shape());
  rope_rotate(x, y, positions, theta_base, false);
  y.set_precision(x.precision());
  return y;
}

// ---------------------------------------------------------------------------
// Differentiable ops

Var matmul(const Var& a, const Var& b) {
  Tape& t = *a.tape;
  return t.record(quack::matmul(a.value(), b.value()), {a, b}, [a, b](Tape& tape, const Tensor& g) {
    if (tape.requires_grad(a)) tape.accumulate(a, matmul_nt(g, b.value()));
    if (tape.requires_grad(b)) tape.accumulate(b, matmul_tn(a.value(), g));
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  Tape& t = *a.tape;
  return t.record(quack::matmul_nt(a.value(), b.value()), {a, b}, [a, b](Tape& tape, const Tensor& g) {
    if (tape.requires_grad(a)) tape.accumulate(a, quack::matmul(g, b.value()));
    if (tape.requires_grad(b)) tape.accumulate(b, matmul_tn(g, a.value()));
  });
}

Var add(const Var& a, const Var& b) {
  return a.tape->record(quack::add(a.value(), b.value()), {a, b}, [a, b](Tape& tape, const Tensor& g) {
    tape.accumulate(a, g);
    tape.accumulate(b, g);
  });
}

Var mul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() != bv.shape())
    throw DimensionError("mul: " + shape_string(av.shape()) + " vs " + shape_string(bv.shape()));
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& tape, const Tensor& g) {
    if (tape.requires_grad(a)) {
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= b.value()[i];
      tape.accumulate(a, ga);
    }
    if (tape.requires_grad(b)) {
      Tensor gb = g;
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= a.value()[i];
      tape.accumulate(b, gb);
    }
  });
}

Var scale(const Var& a, double s) {
  return a.tape->record(scaled(a.value(), s), {a},
                        [a, s](Tape& tape, const Tensor& g) { tape.accumulate(a, scaled(g, s)); });
}

Var silu(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = v / (1.0 + std::exp(-v));
  return a.tape->record(std::move(out), {a}, [a](Tape& tape, const Tensor& g) {
    Tensor ga = g;
    const Tensor& x = a.value();
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const double sg = 1.0 / (1.0 + std::exp(-x[i]));
      ga[i] *= sg * (1.0 + x[i] * (1.0 - sg));
    }
    tape.accumulate(a, ga);
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape->record(Tensor({1}, {s}), {a}, [a](Tape& tape, const Tensor& g) {
    tape.accumulate(a, Tensor::filled(a.value().shape(), g[0]));
  });
}

Var softmax_rows(const Var& x, const Mask* mask) {
  Tape& t = *x.tape;
  const Var y{&t, t.size()};  // the node recorded below
  return t.record(softmax_rows(x.value(), mask), {x}, [x, y](Tape& tape, const Tensor& g) {
    const Tensor& yv = y.value();
    Tensor gx(yv.shape());
    for (std::size_t i = 0; i < yv.rows(); ++i) {
      const double inner = dot(g.row(i), yv.row(i));
      for (std::size_t j = 0; j < yv.cols(); ++j) gx(i, j) = yv(i, j) * (g(i, j) - inner);
    }
    tape.accumulate(x, gx);
  });
}

Var rms_norm(const Var& x, const Var& gain, double eps) {
  Tensor out = rms_norm(x.value(), gain.value(), eps);
  return x.tape->record(std::move(out), {x, gain}, [x, gain, eps](Tape& tape, const Tensor& g) {
    const Tensor& xv = x.value();
    const Tensor& gv = gain.value();
    const std::size_t m = xv.rows(), d = xv.cols();
    Tensor gx(xv.shape()), gg(gv.shape());
    for (std::size_t i = 0; i < m; ++i) {
      const auto xi = xv.row(i);
      const auto gi = g.row(i);
      const double r = inv_rms(xi, eps);
      // Below eps the row is scaled by the constant 1/eps.
      const bool clamped = r == 1.0 / eps;
      double proj = 0.0;  // mean over j of (g_j * gain_j) * xhat_j
      for (std::size_t j = 0; j < d; ++j) {
        const double xhat = xi[j] * r;
        gg[j] += gi[j] * xhat;
        proj += gi[j] * gv[j] * xhat;
      }
      proj = clamped ? 0.0 : proj / static_cast<double>(d);
      auto gxi = gx.row(i);
      for (std::size_t j = 0; j < d; ++j) gxi[j] = r * (gi[j] * gv[j] - xi[j] * r * proj);
    }
    tape.accumulate(x, gx);
    tape.accumulate(gain, gg);
  });
}

Var rope(const Var& x, std::span<const std::size_t> positions, double theta_base) {
  Tensor out = rope(x.value(), positions, theta_base);
  std::vector<std::size_t> pos(positions.begin(), positions.end());
  return x.tape->record(std::move(out), {x}, [x, pos = std::move(pos), theta_base](Tape& tape, const Tensor& g) {
    Tensor gx(g.shape());
    rope_rotate(g, gx, pos, theta_base, true);
    tape.accumulate(x, gx);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no parts");
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  for (const Var& p : parts) {
    if (p.rows() != m) throw DimensionError("concat_cols: row counts differ");
    n += p.cols();
  }
  Tensor out({m, n});
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t i = 0; i < m; ++i)
      std::copy(v.row(i).begin(), v.row(i).end(), out.row(i).begin() + static_cast<std::ptrdiff_t>(off));
    off += v.cols();
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return parts.front().tape->record(std::move(out), parts, [ins](Tape& tape, const Tensor& g) {
    std::size_t off = 0;
    for (const Var& p : ins) {
      const std::size_t w = p.cols();
      if (tape.requires_grad(p)) {
        Tensor gp({g.rows(), w});
        for (std::size_t i = 0; i < g.rows(); ++i)
          std::copy_n(g.row(i).begin() + static_cast<std::ptrdiff_t>(off), w, gp.row(i).begin());
        tape.accumulate(p, gp);
      }
      off += w;
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no parts");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  for (const Var& p : parts) {
    if (p.cols() != n) throw DimensionError("concat_rows: column counts differ");
    m += p.rows();
  }
  std::vector<double> data;
  data.reserve(m * n);
  for (const Var& p : parts) data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  std::vector<Var> ins(parts.begin(), parts.end());
  return parts.front().tape->record(Tensor({m, n}, std::move(data)), parts, [ins](Tape& tape, const Tensor& g) {
    std::size_t off = 0;
    for (const Var& p : ins) {
      const std::size_t cnt = p.value().size();
      if (tape.requires_grad(p)) {
        auto first = g.data().begin() + static_cast<std::ptrdiff_t>(off);
        tape.accumulate(p, Tensor(p.value().shape(), std::vector<double>(first, first + static_cast<std::ptrdiff_t>(cnt))));
      }
      off += cnt;
    }
  });
}

Var slice_rows(const Var& x, std::size_t start, std::size_t count) {
  const Tensor& v = x.value();
  if (count == 0 || start + count > v.rows())
    throw DimensionError("slice_rows: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of " + shape_string(v.shape()));
  const std::size_t n = v.cols();
  auto first = v.data().begin() + static_cast<std::ptrdiff_t>(start * n);
  Tensor out({count, n}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(count * n)));
  return x.tape->record(std::move(out), {x}, [x, start](Tape& tape, const Tensor& g) {
    Tensor gx(x.value().shape());
    std::copy(g.data().begin(), g.data().end(), gx.data().begin() + static_cast<std::ptrdiff_t>(start * g.cols()));
    tape.accumulate(x, gx);
  });
}

Var embedding(const Var& table, std::span<const std::int32_t> tokens) {
  const Tensor& tv = table.value();
  const std::size_t vocab = tv.rows(), d = tv.cols();
  Tensor out({tokens.size(), d});
  for (std::size_t r = 0; r < tokens.size(); ++r) {
    const std::int32_t tok = tokens[r];
    if (tok < 0 || static_cast<std::size_t>(tok) >= vocab)
      throw VocabularyError("token " + std::to_string(tok) + " outside vocabulary of size " + std::to_string(vocab));
    std::copy(tv.row(static_cast<std::size_t>(tok)).begin(), tv.row(static_cast<std::size_t>(tok)).end(),
              out.row(r).begin());
  }
  std::vector<std::int32_t> toks(tokens.begin(), tokens.end());
  return table.tape->record(std::move(out), {table}, [table, toks = std::move(toks)](Tape& tape, const Tensor& g) {
    Tensor gt(table.value().shape());
    for (std::size_t r = 0; r < toks.size(); ++r) {
      auto dst = gt.row(static_cast<std::size_t>(toks[r]));
      const auto src = g.row(r);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
    tape.accumulate(table, gt);
  });
}

Var cross_entropy(const Var& logits, std::span<const std::int32_t> targets) {
  const Tensor& lv = logits.value();
  const std::size_t n = lv.rows(), vocab = lv.cols();
  if (targets.size() != n)
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) +
                         " rows");
  Tensor probs = softmax_rows(lv);
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const std::int32_t t = targets[r];
    if (t == kIgnoreTarget) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab)
      throw VocabularyError("target " + std::to_string(t) + " outside vocabulary of size " + std::to_string(vocab));
    const auto row = lv.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    total += (mx + std::log(z)) - row[static_cast<std::size_t>(t)];
    ++counted;
  }
  if (counted == 0) throw DimensionError("cross_entropy: every target is ignored");
  std::vector<std::int32_t> tg(targets.begin(), targets.end());
  return logits.tape->record(
      Tensor({1}, {total / static_cast<double>(counted)}), {logits},
      [logits, probs = std::move(probs), tg = std::move(tg), counted](Tape& tape, const Tensor& g) {
        const double s = g[0] / static_cast<double>(counted);
        Tensor gl = probs;
        for (std::size_t r = 0; r < tg.size(); ++r) {
          auto row = gl.row(r);
          if (tg[r] == kIgnoreTarget) {
            std::fill(row.begin(), row.end(), 0.0);
            continue;
          }
          row[static_cast<std::size_t>(tg[r])] -= 1.0;
        }
        for (double& v : gl.data()) v *= s;
        tape.accumulate(logits, gl);
      });
}

// ---------------------------------------------------------------------------

GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs, double h, double floor) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& x : inputs) vars.push_back(tape.leaf(x));
    Var out = f(tape, vars);
    tape.backward(out);
    for (const Var& v : vars) analytic.push_back(tape.grad(v));
  }

  auto eval = [&](const std::vector<Tensor>& xs) {
    Tape tape(Tape::Mode::kNoGrad);
    std::vector<Var> vars;
    for (const Tensor& x : xs) vars.push_back(tape.constant(x));
    return f(tape, vars).value()[0];
  };

  GradCheckReport report;
  std::vector<Tensor> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double x = inputs[k][i];
      const double step = h * std::max(1.0, std::abs(x));
      probe[k][i] = x + step;
      const double fp = eval(probe);
      probe[k][i] = x - step;
      const double fm = eval(probe);
      probe[k][i] = x;
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic[k][i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      if (err > report.max_rel_error || (k == 0 && i == 0)) {
        report = {err, k, i, a, numeric};
      }
    }
  }
  return report;
}

}  // namespace quack
