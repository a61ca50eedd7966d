#include "lpm/latcore/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "lpm/latcore/errors.hpp"

namespace lpm {

Tensor2D matmul(const Tensor2D& a, const Tensor2D& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                         " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    }
    Tensor2D out(a.rows(), b.cols());
    // i-k-j order keeps the inner loop contiguous in both b and out.
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto orow = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const float aik = a(i, k);
            if (aik == 0.0f) continue;
            auto brow = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

Tensor2D matmul_bt(const Tensor2D& a, const Tensor2D& b) {
    if (a.cols() != b.cols()) throw ShapeError("matmul_bt: inner dimension mismatch");
    Tensor2D out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto arow = a.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            auto brow = b.row(j);
            float acc = 0.0f;
            for (std::size_t k = 0; k < arow.size(); ++k) acc += arow[k] * brow[k];
            out(i, j) = acc;
        }
    }
    return out;
}

Tensor2D softmax_rows(const Tensor2D& m, const BoolMask* mask) {
    if (mask != nullptr && (mask->rows() != m.rows() || mask->cols() != m.cols())) {
        throw ShapeError("softmax_rows: mask shape mismatch");
    }
    Tensor2D out(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        if (mask != nullptr && mask->count_row(r) == 0) {
            throw DegenerateRowError("softmax_rows: row " + std::to_string(r) + " fully masked");
        }
        auto in = m.row(r);
        auto o = out.row(r);
        float peak = -INFINITY;
        for (std::size_t c = 0; c < in.size(); ++c) {
            const float v = (mask == nullptr || (*mask)(r, c)) ? in[c] : in[c] + kMaskBias;
            o[c] = v;
            peak = std::max(peak, v);
        }
        float total = 0.0f;
        for (std::size_t c = 0; c < in.size(); ++c) {
            // exp of a -1e9 biased logit underflows to exactly 0.
            o[c] = (mask == nullptr || (*mask)(r, c)) ? std::exp(o[c] - peak) : 0.0f;
            total += o[c];
        }
        const float inv = 1.0f / total;
        for (float& v : o) v *= inv;
    }
    return out;
}

std::vector<float> rmsnorm(std::span<const float> v, std::span<const float> gain) {
    if (v.size() != gain.size() || v.empty()) throw ShapeError("rmsnorm: length mismatch");
    float sq = 0.0f;
    for (float x : v) sq += x * x;
    const float inv = 1.0f / std::sqrt(sq / static_cast<float>(v.size()) + kRmsNormEps);
    std::vector<float> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = gain[i] * v[i] * inv;
    return out;
}

Tensor2D rmsnorm_rows(const Tensor2D& m, std::span<const float> gain) {
    Tensor2D out(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto normed = rmsnorm(m.row(r), gain);
        std::copy(normed.begin(), normed.end(), out.row(r).begin());
    }
    return out;
}

float silu(float x) { return x / (1.0f + std::exp(-x)); }

}  // namespace lpm
