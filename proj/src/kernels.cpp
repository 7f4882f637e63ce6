#include "arithlens/kernels.hpp"

#include <cassert>
#include <cmath>
#include <algorithm>
#include <cstddef>
#include <cstring>
#include <vector>

namespace arithlens::kernels {

namespace {

using idx = std::ptrdiff_t;
using v8 = double __attribute__((vector_size(64)));

constexpr std::size_t kTileRows = 4;
constexpr std::size_t kTileCols = 32;

// Register tile: rows [0, R) of A times columns [j0, j0 + 32) of B. Every
// output element is a sequential multiply-add chain over p, so the result of
// a row never depends on which tile height computed it.
template <std::size_t R>
inline void tile_full(const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c, std::size_t ldc,
                      std::size_t k, std::size_t j0, bool accumulate) {
    v8 acc[R][4];
    for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t q = 0; q < 4; ++q) {
            if (accumulate) {
                std::memcpy(&acc[r][q], c + r * ldc + j0 + q * 8, sizeof(v8));
            } else {
                acc[r][q] = v8{};
            }
        }
    }
    for (std::size_t p = 0; p < k; ++p) {
        const double* brow = b + p * ldb + j0;
        v8 b0, b1, b2, b3;
        std::memcpy(&b0, brow, sizeof(v8));
        std::memcpy(&b1, brow + 8, sizeof(v8));
        std::memcpy(&b2, brow + 16, sizeof(v8));
        std::memcpy(&b3, brow + 24, sizeof(v8));
        for (std::size_t r = 0; r < R; ++r) {
            const v8 av = a[r * lda + p] - v8{};
            acc[r][0] += av * b0;
            acc[r][1] += av * b1;
            acc[r][2] += av * b2;
            acc[r][3] += av * b3;
        }
    }
    for (std::size_t r = 0; r < R; ++r) std::memcpy(c + r * ldc + j0, acc[r], sizeof(acc[r]));
}

// Columns past the last full tile.
inline void tile_tail(const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c, std::size_t ldc,
                      std::size_t rows, std::size_t k, std::size_t j0, std::size_t m, bool accumulate) {
    for (std::size_t r = 0; r < rows; ++r) {
        double* out = c + r * ldc;
        for (std::size_t j = j0; j < m; ++j) {
            double acc = accumulate ? out[j] : 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += a[r * lda + p] * b[p * ldb + j];
            out[j] = acc;
        }
    }
}

void gemm(ConstMatRef a, ConstMatRef b, MatRef c, bool accumulate) {
    const std::size_t n = a.rows, k = a.cols, m = b.cols;
    const std::size_t full_cols = m - m % kTileCols;
    const auto blocks = static_cast<idx>((n + kTileRows - 1) / kTileRows);
#pragma omp parallel for schedule(static) if (n * k * m > 262144)
    for (idx blk = 0; blk < blocks; ++blk) {
        const std::size_t i = static_cast<std::size_t>(blk) * kTileRows;
        const std::size_t rows = std::min(kTileRows, n - i);
        const double* ap = a.data + i * k;
        double* cp = c.data + i * m;
        for (std::size_t j = 0; j < full_cols; j += kTileCols) {
            if (rows == kTileRows) {
                tile_full<kTileRows>(ap, k, b.data, m, cp, m, k, j, accumulate);
            } else {
                for (std::size_t r = 0; r < rows; ++r) tile_full<1>(ap + r * k, k, b.data, m, cp + r * m, m, k, j, accumulate);
            }
        }
        if (full_cols < m) tile_tail(ap, k, b.data, m, cp, m, rows, k, full_cols, m, accumulate);
    }
}

void transpose(ConstMatRef in, std::vector<double>& out) {
    out.resize(in.rows * in.cols);
    for (std::size_t i = 0; i < in.rows; ++i) {
        for (std::size_t j = 0; j < in.cols; ++j) out[j * in.rows + i] = in(i, j);
    }
}

}  // namespace

void matmul(ConstMatRef a, ConstMatRef b, MatRef c) {
    assert(a.cols == b.rows && c.rows == a.rows && c.cols == b.cols);
    gemm(a, b, c, false);
}

void matmul_serial(ConstMatRef a, ConstMatRef b, MatRef c) {
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t j = 0; j < b.cols; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < a.cols; ++p) acc += a(i, p) * b(p, j);
            c(i, j) = acc;
        }
    }
}

void matmul_bt(ConstMatRef a, ConstMatRef b, MatRef c) {
    assert(a.cols == b.cols && c.rows == a.rows && c.cols == b.rows);
    thread_local std::vector<double> bt;
    transpose(b, bt);
    gemm(a, {bt.data(), b.cols, b.rows}, c, false);
}

void matmul_bt_serial(ConstMatRef a, ConstMatRef b, MatRef c) {
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t j = 0; j < b.rows; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < a.cols; ++p) acc += a(i, p) * b(j, p);
            c(i, j) = acc;
        }
    }
}

void matmul_at_acc(ConstMatRef a, ConstMatRef b, MatRef c) {
    assert(a.rows == b.rows && c.rows == a.cols && c.cols == b.cols);
    thread_local std::vector<double> at;
    transpose(a, at);
    gemm({at.data(), a.cols, a.rows}, b, c, true);
}

void matmul_at_acc_serial(ConstMatRef a, ConstMatRef b, MatRef c) {
    for (std::size_t p = 0; p < a.cols; ++p) {
        for (std::size_t j = 0; j < b.cols; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < a.rows; ++i) acc += a(i, p) * b(i, j);
            c(p, j) += acc;
        }
    }
}

namespace {

double distance(const double* x, const double* y, std::size_t dim) {
    v8 acc{};
    std::size_t p = 0;
    for (; p + 8 <= dim; p += 8) {
        v8 a, b;
        std::memcpy(&a, x + p, sizeof(v8));
        std::memcpy(&b, y + p, sizeof(v8));
        const v8 diff = a - b;
        acc += diff * diff;
    }
    double sum = 0.0;
    for (int lane = 0; lane < 8; ++lane) sum += acc[lane];
    for (; p < dim; ++p) sum += (x[p] - y[p]) * (x[p] - y[p]);
    return std::sqrt(sum);
}

}  // namespace

void pairwise_distances(ConstMatRef x, ConstMatRef y, MatRef d) {
    assert(x.cols == y.cols && d.rows == x.rows && d.cols == y.rows);
#pragma omp parallel for schedule(static) if (x.rows * y.rows > 4096)
    for (idx ii = 0; ii < static_cast<idx>(x.rows); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        for (std::size_t j = 0; j < y.rows; ++j) d(i, j) = distance(x.row(i), y.row(j), x.cols);
    }
}

void pairwise_distances_serial(ConstMatRef x, ConstMatRef y, MatRef d) {
    for (std::size_t i = 0; i < x.rows; ++i) {
        for (std::size_t j = 0; j < y.rows; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < x.cols; ++p) {
                const double diff = x(i, p) - y(j, p);
                acc += diff * diff;
            }
            d(i, j) = std::sqrt(acc);
        }
    }
}

}  // namespace arithlens::kernels
