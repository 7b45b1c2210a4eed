#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "quack/tensor.hpp"

namespace quack {

// Matrix norm used to parameterize the per-weight learning-rate rules.
enum class NormKind { kFrobenius, kSpectral };

std::string_view to_string(NormKind kind);
NormKind parse_norm_kind(std::string_view text);

// Plain (non-differentiable) kernels. All of them treat rank-1 tensors as a
// single row and throw DimensionError on mismatched extents.
Tensor matmul(const Tensor& a, const Tensor& b);     // a * b
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a * b^T
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // a^T * b
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scaled(const Tensor& a, double s);
// Horizontal concatenation of matrices with equal row counts.
Tensor hconcat(const Tensor& a, const Tensor& b);

double dot(std::span<const double> a, std::span<const double> b);
double frobenius_norm(const Tensor& w);

inline constexpr double kPowerIterationTol = 1e-8;
inline constexpr int kPowerIterationMaxIters = 20000;
inline constexpr std::uint64_t kPowerIterationSeed = 0x9e3779b97f4a7c15ULL;

// Largest singular value by power iteration on w^T w, started from a seeded
// Gaussian unit vector. Stops once the extrapolated remaining error of the
// estimate drops below tol (relative). Throws IterationLimitError carrying
// the last estimate if max_iters is exhausted first.
double spectral_norm(const Tensor& w, double tol = kPowerIterationTol,
                     int max_iters = kPowerIterationMaxIters,
                     std::uint64_t seed = kPowerIterationSeed);

double matrix_norm(const Tensor& w, NormKind kind);

// Singular values in descending order, one-sided Jacobi. Intended for the
// small dense matrices used in verification (a few dozen rows/cols).
std::vector<double> singular_values(const Tensor& w);
double max_singular_value(const Tensor& w);

}  // namespace quack
