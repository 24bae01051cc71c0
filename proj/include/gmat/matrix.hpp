#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gmat/errors.hpp"

namespace gmat {

/// Dense row-major matrix of doubles. Vectors are 1 x n or n x 1 matrices.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        require(data_.size() == rows_ * cols_, "Matrix: data size does not match shape");
    }
    Matrix(std::initializer_list<std::initializer_list<double>> rows) {
        rows_ = rows.size();
        cols_ = rows_ ? rows.begin()->size() : 0;
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            require(r.size() == cols_, "Matrix: ragged initializer");
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    static Matrix scalar(double v) { return Matrix(1, 1, v); }
    static Matrix row(std::span<const double> v) {
        return Matrix(1, v.size(), std::vector<double>(v.begin(), v.end()));
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    std::span<double> row_span(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row_span(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    Matrix transposed() const {
        Matrix t(cols_, rows_);
        for (std::size_t r = 0; r < rows_; ++r)
            for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
        return t;
    }

    Matrix select_rows(std::span<const std::size_t> idx) const {
        Matrix out(idx.size(), cols_);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            require(idx[i] < rows_, "Matrix::select_rows: index out of range");
            std::copy_n(data_.begin() + idx[i] * cols_, cols_, out.data_.begin() + i * cols_);
        }
        return out;
    }

    std::string shape_string() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

namespace detail {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

inline ConstMap view(const Matrix& m) { return ConstMap(m.data(), m.rows(), m.cols()); }
inline MutMap view(Matrix& m) { return MutMap(m.data(), m.rows(), m.cols()); }

} // namespace detail

/// C = A * B (or with either operand transposed).
inline Matrix matmul(const Matrix& a, const Matrix& b, bool trans_a = false, bool trans_b = false) {
    const std::size_t ar = trans_a ? a.cols() : a.rows();
    const std::size_t ac = trans_a ? a.rows() : a.cols();
    const std::size_t br = trans_b ? b.cols() : b.rows();
    const std::size_t bc = trans_b ? b.rows() : b.cols();
    require(ac == br, "matmul: inner dimensions differ (" + a.shape_string() + " vs " + b.shape_string() + ")");
    Matrix c(ar, bc);
    if (c.empty() || ac == 0) return c;
    auto out = detail::view(c);
    const auto av = detail::view(a);
    const auto bv = detail::view(b);
    if (!trans_a && !trans_b) out.noalias() = av * bv;
    else if (trans_a && !trans_b) out.noalias() = av.transpose() * bv;
    else if (!trans_a && trans_b) out.noalias() = av * bv.transpose();
    else out.noalias() = av.transpose() * bv.transpose();
    return c;
}

} // namespace gmat
