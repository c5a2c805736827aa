#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "skipless/linalg.hpp"

using namespace skipless;
using namespace skipless::linalg;

TEST(Vec, ColumnMajorStacking) {
    Matrix m(2, 2);
    m << 1, 2, 3, 4;
    Vector v = vec(m);
    ASSERT_EQ(v.size(), 4);
    EXPECT_EQ(v(0), 1);
    EXPECT_EQ(v(1), 3);
    EXPECT_EQ(v(2), 2);
    EXPECT_EQ(v(3), 4);

    Matrix one(1, 1);
    one << 7;
    EXPECT_EQ(vec(one)(0), 7);
}

TEST(Vec, RoundTripIsExact) {
    Matrix m = gaussian_matrix(3, 5, 11);
    EXPECT_TRUE(unvec(vec(m), 3, 5) == m);
    EXPECT_THROW(unvec(vec(m), 4, 4), ShapeError);
}

TEST(Commutation, SmallCases) {
    EXPECT_EQ(commutation_matrix(1, 1), Matrix::Identity(1, 1));

    Matrix expected = Matrix::Zero(4, 4);
    expected(0, 0) = expected(1, 2) = expected(2, 1) = expected(3, 3) = 1;
    EXPECT_EQ(commutation_matrix(2, 2), expected);
}

TEST(Commutation, TransposesVectorization) {
    for (auto [n, d] : std::vector<std::pair<int, int>>{{2, 3}, {4, 1}, {5, 7}}) {
        Matrix x = gaussian_matrix(n, d, 100 + n * 10 + d);
        Matrix k = commutation_matrix(n, d);
        EXPECT_EQ(Vector(k * vec(x)), vec(x.transpose()));
        // K_{n,d} K_{d,n} = I and K^T = K^{-1}.
        EXPECT_EQ(k * commutation_matrix(d, n), Matrix::Identity(n * d, n * d));
        EXPECT_EQ(k.transpose() * k, Matrix::Identity(n * d, n * d));
        // Permutation form agrees with the dense one.
        Matrix dense_from_perm = commutation_permutation(n, d) * Matrix::Identity(n * d, n * d);
        EXPECT_EQ(dense_from_perm, k);
        // Entries are 0/1 with exactly one 1 per row.
        EXPECT_TRUE(((k.array() == 0.0) || (k.array() == 1.0)).all());
        EXPECT_TRUE((k.rowwise().sum().array() == 1.0).all());
    }
}

TEST(Commutation, BudgetOverflow) { EXPECT_THROW(commutation_matrix(1 << 12, 1 << 12), BudgetError); }

TEST(Kron, Basics) {
    Matrix b = gaussian_matrix(2, 3, 3);
    Matrix k = kron(Matrix::Identity(2, 2), b);
    Matrix expected = Matrix::Zero(4, 6);
    expected.block(0, 0, 2, 3) = b;
    expected.block(2, 3, 2, 3) = b;
    EXPECT_EQ(k, expected);

    Matrix two(1, 1), three(1, 1);
    two << 2;
    three << 3;
    EXPECT_EQ(kron(two, three)(0, 0), 6);
}

TEST(Kron, MixedProductProperty) {
    Matrix a = gaussian_matrix(2, 3, 1), b = gaussian_matrix(4, 2, 2);
    Matrix c = gaussian_matrix(3, 2, 3), d = gaussian_matrix(2, 5, 4);
    Matrix lhs = kron(a, b) * kron(c, d);
    Matrix rhs = kron(a * c, b * d);
    EXPECT_LT((lhs - rhs).norm(), 1e-12 * rhs.norm());
}

TEST(Kron, VecIdentity) {
    // vec(A X B) = (B^T kron A) vec(X)
    Matrix a = gaussian_matrix(3, 4, 5), x = gaussian_matrix(4, 2, 6), b = gaussian_matrix(2, 5, 7);
    Vector lhs = vec(a * x * b);
    Vector rhs = kron(b.transpose(), a) * vec(x);
    EXPECT_LT((lhs - rhs).norm(), 1e-12 * lhs.norm());
}

TEST(Kron, SingularValuesArePairwiseProducts) {
    Matrix a = gaussian_matrix(3, 3, 21), b = gaussian_matrix(3, 3, 22);
    Vector sa = singular_values(a), sb = singular_values(b);
    std::vector<double> products;
    for (Index i = 0; i < 3; ++i)
        for (Index j = 0; j < 3; ++j) products.push_back(sa(i) * sb(j));
    std::sort(products.rbegin(), products.rend());
    Vector sk = singular_values(kron(a, b));
    ASSERT_EQ(sk.size(), 9);
    for (int i = 0; i < 9; ++i) EXPECT_NEAR(sk(i), products[i], 1e-10);
}

TEST(Svd, DiagonalAndOrthogonal) {
    Matrix m = Matrix::Zero(2, 2);
    m(0, 0) = 3;
    m(1, 1) = 1;
    Vector s = svd(m).values;
    EXPECT_NEAR(s(0), 3, 1e-15);
    EXPECT_NEAR(s(1), 1, 1e-15);

    Matrix q = sample_orthogonal(12, 5);
    Vector sq = svd(q).values;
    for (Index i = 0; i < sq.size(); ++i) EXPECT_NEAR(sq(i), 1.0, 1e-12);
}

TEST(Svd, ReconstructionAndOrthonormalFactors) {
    Matrix m = gaussian_matrix(8, 5, 8);
    SingularSpectrum s = svd(m);
    EXPECT_LE((m - s.reconstruct()).norm() / m.norm(), 1e-10);
    EXPECT_LT((s.left.transpose() * s.left - Matrix::Identity(5, 5)).norm(), 1e-10);
    EXPECT_LT((s.right.transpose() * s.right - Matrix::Identity(5, 5)).norm(), 1e-10);
}

TEST(Svd, RejectsNonFinite) {
    Matrix m = Matrix::Ones(2, 2);
    m(0, 1) = std::nan("");
    EXPECT_THROW(svd(m), NonFiniteError);
}

TEST(Svd, ValuesSortedAndNonNegativeOnMixedShapes) {
    Rng rng(99);
    std::uniform_int_distribution<int> dim(1, 12);
    for (int trial = 0; trial < 1000; ++trial) {
        const int r = dim(rng), c = dim(rng);
        Matrix m = gaussian_matrix(r, c, rng);
        if (trial % 7 == 0) m.col(0).setZero();  // rank-deficient cases too
        Vector s = singular_values(m);
        ASSERT_EQ(s.size(), std::min(r, c));
        for (Index i = 0; i < s.size(); ++i) {
            ASSERT_GE(s(i), 0.0);
            if (i > 0) ASSERT_LE(s(i), s(i - 1));
        }
    }
}

TEST(ConditionNumber, Examples) {
    Matrix m = Matrix::Zero(2, 2);
    m(0, 0) = 2;
    m(1, 1) = 1;
    EXPECT_NEAR(condition_number(m).value, 2.0, 1e-14);
    EXPECT_TRUE(condition_number(Matrix::Ones(4, 4)).infinite());
    // The uniform row-stochastic matrix has rank 1.
    auto c = condition_number(Matrix::Constant(10, 10, 0.1));
    EXPECT_TRUE(c.infinite());
    EXPECT_EQ(c.rank_tolerance, 1e-12);
    EXPECT_THROW(condition_number(m, 0.0), std::invalid_argument);
}

TEST(ConditionNumber, ScaleInvariance) {
    for (int seed = 0; seed < 20; ++seed) {
        Matrix m = gaussian_matrix(6, 4, 300 + seed);
        const double k = condition_number(m).value;
        for (double c : {-3.0, 1e-3, 7.5}) EXPECT_NEAR(condition_number(c * m).value / k, 1.0, 1e-10);
    }
}

TEST(ConditionNumber, KroneckerMultiplicative) {
    for (int seed = 0; seed < 20; ++seed) {
        Matrix a = gaussian_matrix(4, 4, 400 + seed), b = gaussian_matrix(3, 3, 500 + seed);
        const double expected = condition_number(a).value * condition_number(b).value;
        EXPECT_NEAR(condition_number(kron(a, b)).value / expected, 1.0, 1e-8);
    }
}

TEST(SampleOrthogonal, Contract) {
    EXPECT_EQ(sample_orthogonal(1, 1), Matrix::Identity(1, 1));
    EXPECT_EQ(sample_orthogonal(1, 2), Matrix::Identity(1, 1));
    Matrix q1 = sample_orthogonal(16, 77), q2 = sample_orthogonal(16, 77);
    EXPECT_TRUE(q1 == q2);
    EXPECT_FALSE(q1 == sample_orthogonal(16, 78));
    EXPECT_LT((q1.transpose() * q1 - Matrix::Identity(16, 16)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_NEAR(condition_number(sample_orthogonal(64, 3)).value, 1.0, 1e-10);
    for (Index j = 0; j < 16; ++j) EXPECT_GE(q1(j, j), 0.0);
}
