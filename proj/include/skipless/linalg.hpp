#pragma once

// Dense linear-algebra substrate. All vectorization is column-major, so
// vec(A X B) = (B^T kron A) vec(X) holds throughout the library.

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>

#include <Eigen/Dense>

#include "skipless/errors.hpp"
#include "skipless/random.hpp"

namespace skipless {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

namespace linalg {

/// Largest dense matrix (in elements) any helper here is allowed to allocate.
inline constexpr std::int64_t kMaxDenseElements = std::int64_t{1} << 27;

inline void check_budget(std::int64_t rows, std::int64_t cols, const char* what) {
    if (rows < 0 || cols < 0 || (cols != 0 && rows > kMaxDenseElements / cols)) {
        throw BudgetError(std::string(what) + ": " + std::to_string(rows) + "x" + std::to_string(cols) +
                          " exceeds dense budget of " + std::to_string(kMaxDenseElements) + " elements");
    }
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

inline void require_finite(const Matrix& m, const char* what) {
    if (!m.allFinite()) throw NonFiniteError(std::string(what) + ": input contains non-finite entries");
}

inline Vector vec(const Matrix& m) {
    return Eigen::Map<const Vector>(m.data(), m.size());
}

inline Matrix unvec(const Vector& v, Index rows, Index cols) {
    if (rows * cols != v.size()) {
        throw ShapeError("unvec: length " + std::to_string(v.size()) + " != " + std::to_string(rows) + "x" +
                         std::to_string(cols));
    }
    return Eigen::Map<const Matrix>(v.data(), rows, cols);
}

/// Permutation P with P * vec(X) = vec(X^T) for every rows x cols matrix X.
inline Eigen::PermutationMatrix<Eigen::Dynamic, Eigen::Dynamic, Index> commutation_permutation(Index rows, Index cols) {
    Eigen::PermutationMatrix<Eigen::Dynamic, Eigen::Dynamic, Index> p(rows * cols);
    // Eigen: (P x)[indices[k]] = x[k]. Entry (i, j) of X sits at i + j*rows in vec(X)
    // and at j + i*cols in vec(X^T).
    for (Index j = 0; j < cols; ++j)
        for (Index i = 0; i < rows; ++i) p.indices()[i + j * rows] = j + i * cols;
    return p;
}

/// Dense (rows*cols) x (rows*cols) commutation matrix K with K vec(X) = vec(X^T).
inline Matrix commutation_matrix(Index rows, Index cols) {
    if (rows < 1 || cols < 1) throw ShapeError("commutation_matrix: dimensions must be >= 1");
    check_budget(rows * cols, rows * cols, "commutation_matrix");
    Matrix k = Matrix::Zero(rows * cols, rows * cols);
    for (Index j = 0; j < cols; ++j)
        for (Index i = 0; i < rows; ++i) k(j + i * cols, i + j * rows) = 1.0;
    return k;
}

inline Matrix kron(const Matrix& a, const Matrix& b) {
    check_budget(a.rows() * b.rows(), a.cols() * b.cols(), "kron");
    Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
    for (Index j = 0; j < a.cols(); ++j)
        for (Index i = 0; i < a.rows(); ++i)
            out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    return out;
}

/// Thin singular value decomposition M = U diag(values) V^T.
struct SingularSpectrum {
    Vector values;  // non-increasing, length min(rows, cols)
    Matrix left;    // U, rows x k
    Matrix right;   // V, cols x k

    double max() const { return values.size() ? values(0) : 0.0; }
    double min() const { return values.size() ? values(values.size() - 1) : 0.0; }
    Matrix reconstruct() const { return left * values.asDiagonal() * right.transpose(); }
};

namespace detail {

inline void check_svd(const Eigen::BDCSVD<Matrix>& s) {
    if (s.info() != Eigen::Success) throw SvdError("svd: iteration did not converge");
}

}  // namespace detail

inline SingularSpectrum svd(const Matrix& m) {
    require_finite(m, "svd");
    Eigen::BDCSVD<Matrix> s(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    detail::check_svd(s);
    return {s.singularValues(), s.matrixU(), s.matrixV()};
}

/// Singular values only (non-increasing); cheaper than a full svd().
inline Vector singular_values(const Matrix& m) {
    require_finite(m, "singular_values");
    if (m.size() == 0) return Vector();
    Eigen::BDCSVD<Matrix> s(m);
    detail::check_svd(s);
    return s.singularValues();
}

inline double spectral_norm(const Matrix& m) {
    if (m.size() == 0) return 0.0;
    return singular_values(m)(0);
}

/// kappa = s_max / s_min, or infinite when s_min <= rank_tolerance * s_max.
struct ConditionNumber {
    double value = 1.0;
    double rank_tolerance = 1e-12;

    bool infinite() const { return std::isinf(value); }
};

inline constexpr double kDefaultRankTolerance = 1e-12;

inline ConditionNumber condition_from_values(const Vector& sv, double rel_tol = kDefaultRankTolerance) {
    ConditionNumber c;
    c.rank_tolerance = rel_tol;
    if (sv.size() == 0) {
        c.value = std::numeric_limits<double>::infinity();
        return c;
    }
    const double smax = sv(0);
    const double smin = sv(sv.size() - 1);
    c.value = (smax > 0.0 && smin > rel_tol * smax) ? smax / smin : std::numeric_limits<double>::infinity();
    return c;
}

inline ConditionNumber condition_number(const Matrix& m, double rel_tol = kDefaultRankTolerance) {
    if (!(rel_tol > 0.0 && rel_tol < 1.0)) throw std::invalid_argument("condition_number: rel_tol must lie in (0, 1)");
    return condition_from_values(singular_values(m), rel_tol);
}

/// Haar-style orthogonal sample: QR of a Gaussian matrix, then each column's sign
/// is flipped so its diagonal entry is non-negative (dim = 1 always yields [[1]]).
inline Matrix sample_orthogonal(Index dim, std::uint64_t seed) {
    if (dim < 1) throw ShapeError("sample_orthogonal: dim must be >= 1");
    Matrix g = gaussian_matrix(dim, dim, seed);
    Eigen::HouseholderQR<Matrix> qr(g);
    Matrix q = qr.householderQ();
    for (Index j = 0; j < dim; ++j)
        if (q(j, j) < 0.0) q.col(j) *= -1.0;
    return q;
}

}  // namespace linalg
}  // namespace skipless
