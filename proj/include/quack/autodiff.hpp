#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "quack/tensor.hpp"

namespace quack {

class Tape;

// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

using GradMap = std::map<std::string, Tensor>;

// Boolean keep-mask for softmax_rows; true entries take part in the softmax.
class Mask {
 public:
  Mask(std::size_t rows, std::size_t cols, bool keep = true);
  // Entry (i, j) is kept iff j <= i + offset.
  static Mask causal(std::size_t rows, std::size_t cols, std::size_t offset = 0);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool operator()(std::size_t i, std::size_t j) const { return keep_[i * cols_ + j] != 0; }
  void set(std::size_t i, std::size_t j, bool keep) { keep_[i * cols_ + j] = keep ? 1 : 0; }

 private:
  std::size_t rows_, cols_;
  std::vector<std::uint8_t> keep_;
};

// Wengert list. Nodes are appended in evaluation order, so the node vector is
// already topologically sorted and backward is a single reverse sweep.
// A kNoGrad tape stores values only; nothing is recorded for differentiation.
class Tape {
 public:
  enum class Mode { kRecord, kNoGrad };
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  explicit Tape(Mode mode = Mode::kRecord) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return mode_ == Mode::kRecord; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Differentiable input. Named leaves are reported by backward().
  Var leaf(Tensor value, std::string name = {});
  Var constant(Tensor value);

  const Tensor& value(const Var& v) const { return nodes_[v.id].value; }
  bool requires_grad(const Var& v) const { return nodes_[v.id].requires_grad; }

  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn);

  // Adds g into the gradient of v (no-op for nodes that do not require grad).
  void accumulate(const Var& v, const Tensor& g);

  // Reverse sweep from a scalar loss. Gradients are reset first, so repeated
  // calls give identical results.
  GradMap backward(const Var& loss);
  // Gradient of any node after backward(); zeros if it received none.
  Tensor grad(const Var& v) const;

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
    std::string name;
  };

  Mode mode_;
  std::vector<Node> nodes_;
};

// Differentiable operations. Operands must live on the same tape.
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);  // a * b^T
Var add(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise
Var scale(const Var& a, double s);
Var silu(const Var& a);
Var sum(const Var& a);
Var softmax_rows(const Var& x, const Mask* mask = nullptr);
// Rows scaled by gain / max(rms(row), eps).
Var rms_norm(const Var& x, const Var& gain, double eps = 1e-6);
// Rotates element pairs (2i, 2i+1) of row r by positions[r] * base^(-2i/d).
Var rope(const Var& x, std::span<const std::size_t> positions, double theta_base = 10000.0);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(const Var& x, std::size_t start, std::size_t count);
Var embedding(const Var& table, std::span<const std::int32_t> tokens);
inline constexpr std::int32_t kIgnoreTarget = -1;

// Mean cross-entropy of softmax(logits) row r against class targets[r], over
// the rows whose target is not kIgnoreTarget.
Var cross_entropy(const Var& logits, std::span<const std::int32_t> targets);

// Plain-tensor counterparts used outside the tape.
Tensor softmax_rows(const Tensor& x, const Mask* mask = nullptr);
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps = 1e-6);
Tensor rope(const Tensor& x, std::span<const std::size_t> positions, double theta_base = 10000.0);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

// Central-difference check of every element of every input. The step for an
// element x is h * max(1, |x|); the relative error uses max(|a|, |n|, floor)
// as denominator.
GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs, double h = 1e-6,
                           double floor = 1e-4);

}  // namespace quack
