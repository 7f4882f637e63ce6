#pragma once

// Dense row-major kernels used by the transformer and the analyses.
//
// Every kernel has an OpenMP version (parallel over output rows) and a
// serial reference written in textbook loop order. The parallel versions
// compute each output row entirely inside one thread with a fixed reduction
// order, so their results do not depend on the thread count, and a single
// row computed alone is bit-identical to the same row inside a larger call.

#include <cstddef>
#include <span>
#include <vector>

namespace arithlens {

struct ConstMatRef {
    const double* data = nullptr;
    std::size_t rows = 0;
    std::size_t cols = 0;

    const double* row(std::size_t i) const { return data + i * cols; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

struct MatRef {
    double* data = nullptr;
    std::size_t rows = 0;
    std::size_t cols = 0;

    double* row(std::size_t i) const { return data + i * cols; }
    double& operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
    operator ConstMatRef() const { return {data, rows, cols}; }
};

/// Owning row-major matrix.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
    std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }
    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    MatRef ref() { return {data_.data(), rows_, cols_}; }
    ConstMatRef ref() const { return {data_.data(), rows_, cols_}; }
    ConstMatRef cref() const { return ref(); }

    void resize(std::size_t rows, std::size_t cols) {
        rows_ = rows;
        cols_ = cols;
        data_.assign(rows * cols, 0.0);
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

namespace kernels {

/// C = A * B, with A (n x k), B (k x m), C (n x m).
void matmul(ConstMatRef a, ConstMatRef b, MatRef c);
void matmul_serial(ConstMatRef a, ConstMatRef b, MatRef c);

/// C = A * B^T, with A (n x m), B (k x m), C (n x k).
void matmul_bt(ConstMatRef a, ConstMatRef b, MatRef c);
void matmul_bt_serial(ConstMatRef a, ConstMatRef b, MatRef c);

/// C += A^T * B, with A (n x k), B (n x m), C (k x m). Weight-gradient accumulation.
void matmul_at_acc(ConstMatRef a, ConstMatRef b, MatRef c);
void matmul_at_acc_serial(ConstMatRef a, ConstMatRef b, MatRef c);

/// D(i, j) = ||x_i - y_j||_2; D is (rows of X x rows of Y).
void pairwise_distances(ConstMatRef x, ConstMatRef y, MatRef d);
void pairwise_distances_serial(ConstMatRef x, ConstMatRef y, MatRef d);

}  // namespace kernels
}  // namespace arithlens
