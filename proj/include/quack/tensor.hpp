#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace quack {

using Shape = std::vector<std::size_t>;

enum class Precision { kDouble, kSingle };

std::string shape_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

// Dense row-major real array. Elements are stored in double; a tensor in
// single precision has every element rounded to the nearest float.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Precision precision = Precision::kDouble);
  Tensor(Shape shape, std::vector<double> data, Precision precision = Precision::kDouble);

  static Tensor matrix(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }
  static Tensor vector(std::size_t n) { return Tensor({n}); }
  static Tensor from_rows(const std::vector<std::vector<double>>& rows);
  static Tensor identity(std::size_t n);
  static Tensor filled(Shape shape, double value);
  // i.i.d. N(0, stddev^2) entries.
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Matrix view: a rank-1 tensor is a single row; higher ranks fold all
  // leading extents into rows.
  std::size_t rows() const;
  std::size_t cols() const;

  Precision precision() const noexcept { return precision_; }
  void set_precision(Precision p);

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  bool all_finite() const;
  void round_to_precision();

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
  Precision precision_ = Precision::kDouble;
};

}  // namespace quack
