#include "embedkit/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace embedkit {

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    std::size_t r = rows.size();
    std::size_t c = r == 0 ? 0 : rows.begin()->size();
    Matrix m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
        if (row.size() != c) throw std::invalid_argument("from_rows: ragged rows");
        std::size_t j = 0;
        for (double v : row) m(i, j++) = v;
        ++i;
    }
    return m;
}

bool Matrix::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw std::invalid_argument("matmul: dimension mismatch " + shape_str(a) + " * " +
                                    shape_str(b));
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* arow = a.row(i);
        double* orow = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            double aik = arow[k];
            if (aik == 0.0) continue;
            const double* brow = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

Matrix transpose(const Matrix& m) {
    Matrix out(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
    return out;
}

namespace {

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) +
                                    " vs " + shape_str(b));
}

}  // namespace

Matrix add(const Matrix& a, const Matrix& b) {
    check_same_shape(a, b, "add");
    Matrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
    return out;
}

Matrix sub(const Matrix& a, const Matrix& b) {
    check_same_shape(a, b, "sub");
    Matrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.data()[i];
    return out;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    check_same_shape(a, b, "hadamard");
    Matrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= b.data()[i];
    return out;
}

Matrix scale(const Matrix& m, double factor) {
    Matrix out = m;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= factor;
    return out;
}

double row_norm(const Matrix& m, std::size_t r) {
    double s = 0.0;
    const double* p = m.row(r);
    for (std::size_t j = 0; j < m.cols(); ++j) s += p[j] * p[j];
    return std::sqrt(s);
}

Matrix l2_normalize_rows(const Matrix& m) {
    Matrix out = m;
    for (std::size_t i = 0; i < m.rows(); ++i) {
        double n = row_norm(m, i);
        if (n < 1e-12)
            throw std::invalid_argument("l2_normalize_rows: row " + std::to_string(i) +
                                        " has near-zero norm");
        double inv = 1.0 / n;
        double* p = out.row(i);
        for (std::size_t j = 0; j < m.cols(); ++j) p[j] *= inv;
    }
    return out;
}

namespace {

double frobenius(const Matrix& m) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) s += m.data()[i] * m.data()[i];
    return std::sqrt(s);
}

double max_abs(const Matrix& m) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) s = std::max(s, std::abs(m.data()[i]));
    return s;
}

}  // namespace

SymEig symmetric_eig(const Matrix& s) {
    if (s.rows() != s.cols())
        throw std::invalid_argument("symmetric_eig: input not square, got " + shape_str(s));
    const std::size_t n = s.rows();

    double asym = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            asym = std::max(asym, std::abs(s(i, j) - s(j, i)));
    if (asym > 1e-9 * std::max(1.0, max_abs(s)))
        throw std::invalid_argument("symmetric_eig: input asymmetry " + std::to_string(asym) +
                                    " exceeds tolerance");

    Matrix a(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) a(i, j) = 0.5 * (s(i, j) + s(j, i));

    Matrix v = Matrix::identity(n);
    const double target = 1e-12 * frobenius(a);
    const int max_sweeps = 100;

    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += 2.0 * a(i, j) * a(i, j);
        if (std::sqrt(off) <= target) break;

        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double apq = a(p, q);
                if (apq == 0.0) continue;
                double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                double t = (theta >= 0.0 ? 1.0 : -1.0) /
                           (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0);
                double sn = t * c;

                double app = a(p, p), aqq = a(q, q);
                a(p, p) = app - t * apq;
                a(q, q) = aqq + t * apq;
                a(p, q) = 0.0;
                a(q, p) = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    if (i == p || i == q) continue;
                    double aip = a(i, p), aiq = a(i, q);
                    a(i, p) = c * aip - sn * aiq;
                    a(p, i) = a(i, p);
                    a(i, q) = sn * aip + c * aiq;
                    a(q, i) = a(i, q);
                }
                for (std::size_t i = 0; i < n; ++i) {
                    double vip = v(i, p), viq = v(i, q);
                    v(i, p) = c * vip - sn * viq;
                    v(i, q) = sn * vip + c * viq;
                }
            }
        }
    }

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::vector<double> diag(n);
    for (std::size_t i = 0; i < n; ++i) diag[i] = a(i, i);
    // stable: equal eigenvalues keep their Jacobi column order
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return diag[x] > diag[y]; });

    SymEig out;
    out.values.resize(n);
    out.vectors = Matrix(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        std::size_t src = order[k];
        out.values[k] = diag[src];
        std::size_t imax = 0;
        double vmax = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double av = std::abs(v(i, src));
            if (av > vmax) {
                vmax = av;
                imax = i;
            }
        }
        double flip = v(imax, src) < 0.0 ? -1.0 : 1.0;
        for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = flip * v(i, src);
    }
    return out;
}

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

RngStream::RngStream(std::uint64_t seed) : seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& s : state_) s = splitmix64(sm);
}

std::uint64_t RngStream::next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
}

double RngStream::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::gaussian() {
    double u1 = 1.0 - uniform();  // (0, 1], keeps the log finite
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t RngStream::uniform_below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_below: n must be positive");
    // rejection sampling to avoid modulo bias
    for (;;) {
        std::uint64_t x = next_u64();
        std::uint64_t r = x % n;
        if (x - r <= UINT64_MAX - (n - 1)) return r;
    }
}

Matrix RngStream::uniform_matrix(std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = uniform();
    return m;
}

Matrix RngStream::gaussian_matrix(std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = gaussian();
    return m;
}

Matrix RngStream::bernoulli_matrix(std::size_t rows, std::size_t cols, double p) {
    if (!(p >= 0.0 && p <= 1.0))
        throw std::invalid_argument("bernoulli_matrix: p must be in [0,1], got " +
                                    std::to_string(p));
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = uniform() < p ? 1.0 : 0.0;
    return m;
}

}  // namespace embedkit
