#pragma once

// Dense double-precision linear algebra, seeded randomness and a symmetric
// eigensolver. Everything here is deterministic: fixed inputs (and seeds)
// give bit-identical outputs on any platform with IEEE-754 doubles.

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace embedkit {

// Row-major dense matrix of doubles. Row vectors are stored as 1xN.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Matrix identity(std::size_t n);
    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    double* row(std::size_t r) { return data_.data() + r * cols_; }
    const double* row(std::size_t r) const { return data_.data() + r * cols_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
    bool all_finite() const;

    bool operator==(const Matrix& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

std::string shape_str(const Matrix& m);

// Standard product, single-threaded with a fixed summation order (k ascending),
// so results are reproducible bit-for-bit. Throws std::invalid_argument on
// inner-dimension mismatch.
Matrix matmul(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& m);

// Elementwise helpers used throughout the model code.
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& m, double factor);

double row_norm(const Matrix& m, std::size_t r);

// Scales every row to unit Euclidean norm. Rows with norm below 1e-12 are
// rejected (std::invalid_argument naming the row index).
Matrix l2_normalize_rows(const Matrix& m);

struct SymEig {
    std::vector<double> values;  // descending
    Matrix vectors;              // column i is the eigenvector for values[i]
};

// Eigendecomposition of a symmetric matrix via cyclic Jacobi rotations.
// The input is symmetrized as (S + S^T)/2 after checking that the asymmetry
// is within tolerance. Convergence: off-diagonal Frobenius norm below
// 1e-12 * ||S||_F, at most 100 sweeps. Sign convention: the entry of largest
// magnitude in each eigenvector is made positive.
SymEig symmetric_eig(const Matrix& s);

// splitmix64-seeded xoshiro256** generator. Gaussians via Box-Muller with no
// cached spare: every gaussian() consumes exactly two uniforms.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed);

    std::uint64_t seed() const { return seed_; }
    std::uint64_t next_u64();

    double uniform();                          // [0, 1)
    double gaussian();                         // mean 0, stddev 1
    std::uint64_t uniform_below(std::uint64_t n);  // [0, n), unbiased

    Matrix uniform_matrix(std::size_t rows, std::size_t cols);
    Matrix gaussian_matrix(std::size_t rows, std::size_t cols);
    // Entries are 1 with probability p, else 0. Requires 0 <= p <= 1.
    Matrix bernoulli_matrix(std::size_t rows, std::size_t cols, double p);

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t seed_ = 0;
    std::array<std::uint64_t, 4> state_{};
};

}  // namespace embedkit
