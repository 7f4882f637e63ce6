#include <doctest.h>
#include <omp.h>

#include <cmath>
#include <random>

#include "arithlens/kernels.hpp"

using namespace arithlens;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist;
    Matrix m(rows, cols);
    for (auto& v : m.values()) v = dist(rng);
    return m;
}

double max_rel_diff(const Matrix& a, const Matrix& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.values().size(); ++i) {
        const double scale = std::max(1.0, std::abs(b.values()[i]));
        worst = std::max(worst, std::abs(a.values()[i] - b.values()[i]) / scale);
    }
    return worst;
}

Matrix transposed(const Matrix& m) {
    Matrix t(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
    return t;
}

struct Shape {
    std::size_t n, k, m;
};
constexpr Shape kShapes[] = {{1, 1, 1}, {3, 5, 7}, {4, 16, 32}, {5, 128, 172}, {37, 64, 65}, {130, 33, 96}, {8, 512, 128}};

}  // namespace

TEST_SUITE("kernels") {

TEST_CASE("matmul agrees with the serial reference") {
    for (const auto& s : kShapes) {
        const auto a = random_matrix(s.n, s.k, 1), b = random_matrix(s.k, s.m, 2);
        Matrix fast(s.n, s.m), ref(s.n, s.m);
        kernels::matmul(a.ref(), b.ref(), fast.ref());
        kernels::matmul_serial(a.ref(), b.ref(), ref.ref());
        CHECK(max_rel_diff(fast, ref) < 1e-12);
    }
}

TEST_CASE("matmul_bt agrees with the serial reference") {
    for (const auto& s : kShapes) {
        const auto a = random_matrix(s.n, s.k, 3), b = random_matrix(s.m, s.k, 4);
        Matrix fast(s.n, s.m), ref(s.n, s.m), via_t(s.n, s.m);
        kernels::matmul_bt(a.ref(), b.ref(), fast.ref());
        kernels::matmul_bt_serial(a.ref(), b.ref(), ref.ref());
        const auto bt = transposed(b);
        kernels::matmul_serial(a.ref(), bt.ref(), via_t.ref());
        CHECK(max_rel_diff(fast, ref) < 1e-12);
        CHECK(max_rel_diff(ref, via_t) < 1e-12);
    }
}

TEST_CASE("matmul_at_acc accumulates A^T B") {
    for (const auto& s : kShapes) {
        const auto a = random_matrix(s.n, s.k, 5), b = random_matrix(s.n, s.m, 6);
        const auto start = random_matrix(s.k, s.m, 7);
        Matrix fast = start, ref = start;
        kernels::matmul_at_acc(a.ref(), b.ref(), fast.ref());
        kernels::matmul_at_acc_serial(a.ref(), b.ref(), ref.ref());
        CHECK(max_rel_diff(fast, ref) < 1e-12);
    }
}

TEST_CASE("a row computed alone is bit-identical to the same row in a batch") {
    const auto a = random_matrix(23, 128, 8), b = random_matrix(128, 172, 9);
    Matrix all(23, 172);
    kernels::matmul(a.ref(), b.ref(), all.ref());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        Matrix one(1, 172);
        kernels::matmul({a.ref().row(i), 1, 128}, b.ref(), one.ref());
        for (std::size_t j = 0; j < 172; ++j) REQUIRE(one(0, j) == all(i, j));
    }
}

TEST_CASE("results do not depend on the thread count") {
    const auto a = random_matrix(300, 128, 10), b = random_matrix(128, 512, 11);
    const int before = omp_get_max_threads();
    omp_set_num_threads(1);
    Matrix one(300, 512);
    kernels::matmul(a.ref(), b.ref(), one.ref());
    omp_set_num_threads(4);
    Matrix four(300, 512);
    kernels::matmul(a.ref(), b.ref(), four.ref());
    omp_set_num_threads(before);
    CHECK(one == four);
}

TEST_CASE("pairwise distances") {
    const auto x = random_matrix(40, 19, 12), y = random_matrix(25, 19, 13);
    Matrix fast(40, 25), ref(40, 25);
    kernels::pairwise_distances(x.ref(), y.ref(), fast.ref());
    kernels::pairwise_distances_serial(x.ref(), y.ref(), ref.ref());
    CHECK(max_rel_diff(fast, ref) < 1e-12);

    Matrix self(40, 40);
    kernels::pairwise_distances(x.ref(), x.ref(), self.ref());
    for (std::size_t i = 0; i < 40; ++i) {
        CHECK(self(i, i) == 0.0);
        for (std::size_t j = 0; j < 40; ++j) CHECK(self(i, j) == doctest::Approx(self(j, i)).epsilon(1e-14));
    }
    Matrix p(1, 2, 0.0), q(1, 2, 0.0);
    q(0, 0) = 3.0;
    q(0, 1) = 4.0;
    Matrix d(1, 1);
    kernels::pairwise_distances(p.ref(), q.ref(), d.ref());
    CHECK(d(0, 0) == 5.0);
}

}
