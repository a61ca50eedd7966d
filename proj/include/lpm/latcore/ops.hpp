#pragma once

#include <optional>
#include <span>
#include <vector>

#include "lpm/latcore/tensor.hpp"

namespace lpm {

inline constexpr float kRmsNormEps = 1e-6f;
inline constexpr float kMaskBias = -1e9f;

// Throws ShapeError when a.cols != b.rows.
Tensor2D matmul(const Tensor2D& a, const Tensor2D& b);

// a * b^T, the attention-logit shape.
Tensor2D matmul_bt(const Tensor2D& a, const Tensor2D& b);

// Row-wise softmax. Masked-out entries get an additive -1e9 bias and come out
// exactly zero. A row with no unmasked entry raises DegenerateRowError.
Tensor2D softmax_rows(const Tensor2D& m, const BoolMask* mask = nullptr);

// gain_i * v_i / sqrt(mean(v^2) + eps)
std::vector<float> rmsnorm(std::span<const float> v, std::span<const float> gain);

// rmsnorm applied to every row.
Tensor2D rmsnorm_rows(const Tensor2D& m, std::span<const float> gain);

float silu(float x);

}  // namespace lpm
