#pragma once

// Weight initialization schemes.
//
//   default  - truncated normal on every weight matrix, zero biases.
//   proposed - per head W_Q,i W_K,i^T = best rank-d_h approximation of alpha Z + beta I
//              with Z_ij ~ N(0, 1/d); W_V = c U, W_O = c V^T from the SVD of a Gaussian
//              matrix (so sum_i W_V,i W_O,i = c^2 U V^T); semi-orthogonal MLP weights.

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>

#include "skipless/linalg.hpp"
#include "skipless/model.hpp"
#include "skipless/random.hpp"

namespace skipless {

enum class InitScheme { default_normal, proposed };

inline const char* to_string(InitScheme s) { return s == InitScheme::proposed ? "proposed" : "default"; }

struct InitSpec {
    InitScheme scheme = InitScheme::default_normal;
    double alpha = 2.0;
    double beta = 0.6;
    double c = 3.0;
    double trunc_std = 0.02;
    double trunc_bound = 2.0;  // in standard deviations
    double mlp_gain = 1.0;
    std::uint64_t seed = 0;

    /// (alpha, beta, c) = (2, 0.6, 3): supervised classification setting.
    static InitSpec supervised(std::uint64_t seed = 0) {
        InitSpec s;
        s.scheme = InitScheme::proposed;
        s.seed = seed;
        return s;
    }

    /// (alpha, beta, c) = (1.8, 1, 3): self-supervised setting.
    static InitSpec self_supervised(std::uint64_t seed = 0) {
        InitSpec s = supervised(seed);
        s.alpha = 1.8;
        s.beta = 1.0;
        return s;
    }

    static InitSpec default_init(std::uint64_t seed = 0) {
        InitSpec s;
        s.seed = seed;
        return s;
    }

    void validate() const {
        if (!(trunc_std > 0.0) || !(trunc_bound > 0.0)) throw std::invalid_argument("trunc_std and trunc_bound must be positive");
        if (scheme == InitScheme::proposed) {
            if (!(alpha >= 0.0) || !(beta >= 0.0)) throw std::invalid_argument("alpha and beta must be >= 0");
            if (!(c > 0.0)) throw std::invalid_argument("c must be positive");
            if (!(mlp_gain > 0.0)) throw std::invalid_argument("mlp_gain must be positive");
        }
    }
};

inline Matrix truncated_normal(Index rows, Index cols, double stddev, double bound, std::uint64_t seed) {
    if (!(stddev > 0.0)) throw std::invalid_argument("truncated_normal: stddev must be positive");
    if (!(bound > 0.0)) throw std::invalid_argument("truncated_normal: bound must be positive");
    Rng rng(seed);
    std::normal_distribution<double> dist(0.0, stddev);
    const double limit = bound * stddev;
    Matrix m(rows, cols);
    for (Index k = 0; k < m.size(); ++k) {
        double v;
        do {
            v = dist(rng);
        } while (std::abs(v) > limit);
        m.data()[k] = v;
    }
    return m;
}

struct ValueOutputPair {
    Matrix wv;
    Matrix wo;
};

inline ValueOutputPair orthonormal_vo(int d, int heads, double c, std::uint64_t seed) {
    if (d < 1 || heads < 1 || d % heads != 0)
        throw ShapeError("orthonormal_vo: d=" + std::to_string(d) + " must be divisible by heads=" + std::to_string(heads));
    const Matrix q = gaussian_matrix(d, d, seed);
    Eigen::JacobiSVD<Matrix> s(q, Eigen::ComputeFullU | Eigen::ComputeFullV);
    if (s.info() != Eigen::Success) throw SvdError("orthonormal_vo: svd did not converge");
    // Heads take contiguous column blocks of W_V and the matching row blocks of
    // W_O, so the per-head products sum to c^2 U V^T.
    return {c * s.matrixU(), c * s.matrixV().transpose()};
}

struct MimeticPair {
    Matrix wq;      // d x d_h
    Matrix wk;      // d x d_h
    Matrix target;  // alpha Z + beta I, d x d
};

inline MimeticPair mimetic_qk(int d, int head_dim, double alpha, double beta, std::uint64_t seed) {
    if (head_dim < 1 || head_dim > d) throw ShapeError("mimetic_qk: need 1 <= d_h <= d");
    MimeticPair out;
    out.target = alpha * gaussian_matrix(d, d, seed, 1.0 / std::sqrt(static_cast<double>(d))) +
                 beta * Matrix::Identity(d, d);
    Eigen::JacobiSVD<Matrix> s(out.target, Eigen::ComputeFullU | Eigen::ComputeFullV);
    if (s.info() != Eigen::Success) throw SvdError("mimetic_qk: svd did not converge");
    // Square-root split of the leading d_h singular triplets.
    const Vector root = s.singularValues().head(head_dim).cwiseSqrt();
    out.wq = s.matrixU().leftCols(head_dim) * root.asDiagonal();
    out.wk = s.matrixV().leftCols(head_dim) * root.asDiagonal();
    return out;
}

/// fan_in x fan_out matrix whose smaller side is orthonormal, times gain.
inline Matrix mlp_orthogonal(int fan_in, int fan_out, double gain, std::uint64_t seed) {
    if (fan_in < 1 || fan_out < 1) throw ShapeError("mlp_orthogonal: fan_in and fan_out must be >= 1");
    const Index big = std::max(fan_in, fan_out);
    const Index small = std::min(fan_in, fan_out);
    const Matrix g = gaussian_matrix(big, small, seed);
    Eigen::HouseholderQR<Matrix> qr(g);
    Matrix q = qr.householderQ() * Matrix::Identity(big, small);
    const Matrix r = qr.matrixQR().topRows(small).triangularView<Eigen::Upper>();
    for (Index j = 0; j < small; ++j)
        if (r(j, j) < 0.0) q.col(j) *= -1.0;
    return gain * (fan_in >= fan_out ? q : Matrix(q.transpose()));
}

namespace detail {

enum TensorId : std::uint64_t { kQuery = 0, kKey = 1, kValue = 2, kOutput = 3, kMlpIn = 4, kMlpOut = 5, kMimetic = 6, kValueOutput = 7 };

}  // namespace detail

inline NetworkParams init_network(const ModelConfig& config, const InitSpec& spec) {
    config.validate();
    spec.validate();
    const int d = config.dim;
    const int dh = config.head_dim();
    NetworkParams net;
    net.blocks.reserve(config.layers);
    for (int l = 0; l < config.layers; ++l) {
        auto seed_for = [&](std::uint64_t tensor, std::uint64_t sub = 0) {
            return derive_seed(spec.seed, {static_cast<std::uint64_t>(l), tensor, sub});
        };
        BlockParams p = BlockParams::zeros(config);
        if (spec.scheme == InitScheme::default_normal) {
            const double sd = spec.trunc_std;
            const double b = spec.trunc_bound;
            p.wq = truncated_normal(d, d, sd, b, seed_for(detail::kQuery));
            p.wk = truncated_normal(d, d, sd, b, seed_for(detail::kKey));
            p.wv = truncated_normal(d, d, sd, b, seed_for(detail::kValue));
            p.wo = truncated_normal(d, d, sd, b, seed_for(detail::kOutput));
            p.mlp_w1 = truncated_normal(d, config.mlp_hidden, sd, b, seed_for(detail::kMlpIn));
            p.mlp_w2 = truncated_normal(config.mlp_hidden, d, sd, b, seed_for(detail::kMlpOut));
        } else {
            for (int h = 0; h < config.heads; ++h) {
                MimeticPair qk = mimetic_qk(d, dh, spec.alpha, spec.beta, seed_for(detail::kMimetic, h));
                p.wq.middleCols(h * dh, dh) = qk.wq;
                p.wk.middleCols(h * dh, dh) = qk.wk;
            }
            ValueOutputPair vo = orthonormal_vo(d, config.heads, spec.c, seed_for(detail::kValueOutput));
            p.wv = std::move(vo.wv);
            p.wo = std::move(vo.wo);
            p.mlp_w1 = mlp_orthogonal(d, config.mlp_hidden, spec.mlp_gain, seed_for(detail::kMlpIn));
            p.mlp_w2 = mlp_orthogonal(config.mlp_hidden, d, spec.mlp_gain, seed_for(detail::kMlpOut));
        }
        net.blocks.push_back(std::move(p));
    }
    return net;
}

}  // namespace skipless
