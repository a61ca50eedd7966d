#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace lpm {

// Dense row-major matrix of f32. Rows are tokens, columns are channels.
class Tensor2D {
public:
    Tensor2D() = default;
    Tensor2D(std::size_t rows, std::size_t cols, float fill = 0.0f);
    Tensor2D(std::size_t rows, std::size_t cols, std::vector<float> data);

    static Tensor2D from_rows(std::initializer_list<std::initializer_list<float>> rows);
    static Tensor2D identity(std::size_t n);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<float> values() { return data_; }
    std::span<const float> values() const { return data_; }
    const std::vector<float>& data() const { return data_; }

    // Copy of rows [begin, begin + count).
    Tensor2D slice_rows(std::size_t begin, std::size_t count) const;
    // Copy of columns [begin, begin + count).
    Tensor2D slice_cols(std::size_t begin, std::size_t count) const;
    void set_cols(std::size_t begin, const Tensor2D& block);

    bool all_finite() const;

    friend bool operator==(const Tensor2D&, const Tensor2D&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

// Stacks matrices vertically; all non-empty parts must share a column count.
Tensor2D vstack(std::span<const Tensor2D> parts);

Tensor2D transpose(const Tensor2D& m);
Tensor2D add(const Tensor2D& a, const Tensor2D& b);
Tensor2D sub(const Tensor2D& a, const Tensor2D& b);
Tensor2D scale(const Tensor2D& a, float s);
void add_inplace(Tensor2D& a, const Tensor2D& b);

float max_abs_diff(const Tensor2D& a, const Tensor2D& b);

// Row-major boolean matrix; true = attend.
class BoolMask {
public:
    BoolMask() = default;
    BoolMask(std::size_t rows, std::size_t cols, bool fill = false)
        : rows_(rows), cols_(cols), bits_(rows * cols, fill ? 1 : 0) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }

    bool operator()(std::size_t r, std::size_t c) const { return bits_[r * cols_ + c] != 0; }
    void set(std::size_t r, std::size_t c, bool v) { bits_[r * cols_ + c] = v ? 1 : 0; }

    std::size_t count_row(std::size_t r) const;
    BoolMask slice_rows(std::size_t begin, std::size_t count) const;

    friend bool operator==(const BoolMask&, const BoolMask&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<std::uint8_t> bits_;
};

}  // namespace lpm
