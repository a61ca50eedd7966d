#include "lpm/latcore/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "lpm/latcore/errors.hpp"

namespace lpm {

namespace {

void require_same_shape(const Tensor2D& a, const Tensor2D& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(op) + ": shape " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
    }
}

}  // namespace

Tensor2D::Tensor2D(std::size_t rows, std::size_t cols, float fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Tensor2D::Tensor2D(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw ShapeError("Tensor2D: data length " + std::to_string(data_.size()) +
                         " != " + std::to_string(rows_) + "*" + std::to_string(cols_));
    }
}

Tensor2D Tensor2D::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<float> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw ShapeError("Tensor2D::from_rows: ragged rows");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor2D(r, c, std::move(data));
}

Tensor2D Tensor2D::identity(std::size_t n) {
    Tensor2D t(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0f;
    return t;
}

Tensor2D Tensor2D::slice_rows(std::size_t begin, std::size_t count) const {
    if (begin + count > rows_) throw ShapeError("slice_rows: out of range");
    std::vector<float> out(data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_),
                           data_.begin() + static_cast<std::ptrdiff_t>((begin + count) * cols_));
    return Tensor2D(count, cols_, std::move(out));
}

Tensor2D Tensor2D::slice_cols(std::size_t begin, std::size_t count) const {
    if (begin + count > cols_) throw ShapeError("slice_cols: out of range");
    Tensor2D out(rows_, count);
    for (std::size_t r = 0; r < rows_; ++r) {
        std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(r * cols_ + begin), count,
                    out.data_.begin() + static_cast<std::ptrdiff_t>(r * count));
    }
    return out;
}

void Tensor2D::set_cols(std::size_t begin, const Tensor2D& block) {
    if (block.rows() != rows_ || begin + block.cols() > cols_) {
        throw ShapeError("set_cols: block does not fit");
    }
    for (std::size_t r = 0; r < rows_; ++r) {
        auto src = block.row(r);
        std::copy(src.begin(), src.end(), data_.begin() + static_cast<std::ptrdiff_t>(r * cols_ + begin));
    }
}

bool Tensor2D::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

Tensor2D vstack(std::span<const Tensor2D> parts) {
    std::size_t cols = 0;
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.rows() == 0) continue;
        if (cols == 0) cols = p.cols();
        if (p.cols() != cols) throw ShapeError("vstack: column mismatch");
        rows += p.rows();
    }
    std::vector<float> data;
    data.reserve(rows * cols);
    for (const auto& p : parts) {
        if (p.rows() == 0) continue;
        data.insert(data.end(), p.data().begin(), p.data().end());
    }
    return Tensor2D(rows, cols, std::move(data));
}

Tensor2D transpose(const Tensor2D& m) {
    Tensor2D out(m.cols(), m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) out(c, r) = m(r, c);
    return out;
}

Tensor2D add(const Tensor2D& a, const Tensor2D& b) {
    Tensor2D out = a;
    add_inplace(out, b);
    return out;
}

Tensor2D sub(const Tensor2D& a, const Tensor2D& b) {
    require_same_shape(a, b, "sub");
    Tensor2D out = a;
    auto o = out.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
    return out;
}

Tensor2D scale(const Tensor2D& a, float s) {
    Tensor2D out = a;
    for (float& v : out.values()) v *= s;
    return out;
}

void add_inplace(Tensor2D& a, const Tensor2D& b) {
    require_same_shape(a, b, "add");
    auto o = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
}

float max_abs_diff(const Tensor2D& a, const Tensor2D& b) {
    require_same_shape(a, b, "max_abs_diff");
    float worst = 0.0f;
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < av.size(); ++i) worst = std::max(worst, std::fabs(av[i] - bv[i]));
    return worst;
}

std::size_t BoolMask::count_row(std::size_t r) const {
    std::size_t n = 0;
    for (std::size_t c = 0; c < cols_; ++c) n += bits_[r * cols_ + c];
    return n;
}

BoolMask BoolMask::slice_rows(std::size_t begin, std::size_t count) const {
    if (begin + count > rows_) throw ShapeError("BoolMask::slice_rows: out of range");
    BoolMask out(count, cols_);
    std::copy_n(bits_.begin() + static_cast<std::ptrdiff_t>(begin * cols_), count * cols_, out.bits_.begin());
    return out;
}

}  // namespace lpm
