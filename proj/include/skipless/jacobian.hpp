#pragma once

// Analytic Jacobians of the attention and MLP sub-blocks, the skip/skipless chain
// products, batch stacking, and a central finite-difference oracle.
//
// Conventions:
//   * vec() is column-major everywhere; vec(A X B) = (B^T kron A) vec(X).
//   * Layer indices are 0-based (layer 0 is the first block).
//   * Attention parameters are flattened as [vec W_Q; vec W_K; vec W_V; vec W_O],
//     MLP parameters as [vec W1; b1; vec W2; b2].
//   * Every function here assumes layer_norm is off; the normalized model is only
//     used by the training harness.

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "skipless/errors.hpp"
#include "skipless/linalg.hpp"
#include "skipless/model.hpp"

namespace skipless {

/// Dense Jacobians are materialized only while n*d stays under this cap.
inline constexpr Index kMaxTokenDim = 2048;

enum class InputKind { attention, mlp };
enum class ParamTarget { attention, mlp };

struct InputJacobian {
    Matrix matrix;  // nd x nd
    int layer = 0;
    InputKind kind = InputKind::attention;
};

struct ParamJacobian {
    Matrix matrix;  // (m n d) x p_l
    int layer = 0;
    ParamTarget target = ParamTarget::attention;
};

/// Central-difference step policy: h_j = relative_step * max(1, |x_j|).
struct StepPolicy {
    double relative_step = std::cbrt(std::numeric_limits<double>::epsilon());
};

using VectorFunction = std::function<Vector(const Vector&)>;

inline Matrix finite_difference_jacobian(const VectorFunction& f, const Vector& x, StepPolicy policy = {}) {
    const Vector f0 = f(x);
    if (!f0.allFinite()) throw NonFiniteError("finite_difference_jacobian: f(x) is non-finite at the base point");
    linalg::check_budget(f0.size(), x.size(), "finite_difference_jacobian");
    Matrix jac(f0.size(), x.size());
    Vector probe = x;
    for (Index j = 0; j < x.size(); ++j) {
        const double h = policy.relative_step * std::max(1.0, std::abs(x(j)));
        probe(j) = x(j) + h;
        const Vector plus = f(probe);
        probe(j) = x(j) - h;
        const Vector minus = f(probe);
        probe(j) = x(j);
        if (!plus.allFinite() || !minus.allFinite())
            throw NonFiniteError("finite_difference_jacobian: non-finite evaluation at coordinate " + std::to_string(j));
        jac.col(j) = (plus - minus) / (2.0 * h);
    }
    return jac;
}

/// ||a - b||_F / ||b||_F (or ||a||_F when b vanishes).
inline double relative_error(const Matrix& analytic, const Matrix& reference) {
    const double denom = reference.norm();
    const double diff = (analytic - reference).norm();
    return denom > 0.0 ? diff / denom : diff;
}

namespace detail {

inline void check_budget_nd(Index n, Index d) {
    if (n * d > kMaxTokenDim)
        throw BudgetError("n*d = " + std::to_string(n * d) + " exceeds the dense Jacobian cap of " +
                          std::to_string(kMaxTokenDim));
}

inline void require_plain(const ModelConfig& c) {
    if (c.layer_norm) throw std::invalid_argument("analytic Jacobians are defined for layer_norm = false only");
}

inline const LayerTrace& layer_of(const ForwardTrace& t, int layer) {
    if (layer < 0 || layer >= static_cast<int>(t.layers.size()))
        throw ShapeError("layer " + std::to_string(layer) + " out of range [0, " + std::to_string(t.layers.size()) + ")");
    return t.layers[layer];
}

inline Matrix identity_kron(Index n, const Matrix& b) { return linalg::kron(Matrix::Identity(n, n), b); }
inline Matrix kron_identity(const Matrix& a, Index n) { return linalg::kron(a, Matrix::Identity(n, n)); }

}  // namespace detail

/// d vec(A) / d vec(M) for A = row_softmax(M), an n^2 x n^2 matrix.
///
/// In row-major order the Jacobian is block diagonal with blocks
/// (J_i)_{jk} = A_ij (delta_jk - A_ik); it is brought to column-major order by
/// conjugating with the commutation permutation.
inline Matrix softmax_jacobian(const Matrix& a) {
    const Index n = a.rows();
    if (a.cols() != n) throw ShapeError("softmax_jacobian: attention matrix must be square");
    if ((a.array() < -1e-12).any()) throw std::invalid_argument("softmax_jacobian: negative attention entry");
    if (((a.rowwise().sum().array() - 1.0).abs() > 1e-9).any())
        throw std::invalid_argument("softmax_jacobian: attention rows do not sum to 1");
    linalg::check_budget(n * n, n * n, "softmax_jacobian");
    Matrix row_major = Matrix::Zero(n * n, n * n);
    for (Index i = 0; i < n; ++i) {
        const Vector r = a.row(i).transpose();
        row_major.block(i * n, i * n, n, n) = Matrix(r.asDiagonal()) - r * r.transpose();
    }
    const auto p = linalg::commutation_permutation(n, n);  // vec(A) -> vec(A^T)
    return p.transpose() * row_major * p;
}

/// d vec(X P X^T / scale) / d vec(X), an n^2 x nd matrix:
/// ((X P^T) kron I_n + (I_n kron X P) K_{n,d}) / scale.
inline Matrix logits_input_jacobian(const Matrix& x, const Matrix& p, double scale) {
    const Index n = x.rows();
    const Index d = x.cols();
    if (p.rows() != d || p.cols() != d) throw ShapeError("logits_input_jacobian: P must be d x d");
    detail::check_budget_nd(n, d);
    Matrix left = detail::kron_identity(x * p.transpose(), n);
    Matrix right = detail::identity_kron(n, x * p) * linalg::commutation_permutation(n, d);
    return (left + right) / scale;
}

/// A' for one head: d vec(A_i) / d vec(Xhat_{l-1}), an n^2 x nd matrix.
inline Matrix attention_input_jacobian(const ForwardTrace& trace, const NetworkParams& params, const ModelConfig& c,
                                       int layer, int head) {
    detail::require_plain(c);
    const LayerTrace& t = detail::layer_of(trace, layer);
    if (head < 0 || head >= c.heads) throw ShapeError("head index out of range");
    const Matrix p = params.blocks[layer].qk_product(head, c.head_dim());
    return softmax_jacobian(t.attention[head]) * logits_input_jacobian(t.sa_input, p, c.attention_scale);
}

/// Dominant/perturbation split of K_l, summed over heads:
///   B = sum_i (W_V,i W_O,i)^T kron A_i
///   E = sum_i ((Xhat W_V,i W_O,i) kron I_n)^T A'_i
/// Since (M kron I)^T = M^T kron I, the transpose on the left factor of E is the
/// same as the (W_O^T W_V^T X^T kron I_n) factor that appears when expanding
/// the product rule.
struct SaInputSplit {
    Matrix dominant;
    Matrix perturbation;
};

inline SaInputSplit sa_input_split(const ForwardTrace& trace, const NetworkParams& params, const ModelConfig& c,
                                   int layer, int head = -1) {
    detail::require_plain(c);
    const LayerTrace& t = detail::layer_of(trace, layer);
    const Index n = t.sa_input.rows();
    const Index d = t.sa_input.cols();
    detail::check_budget_nd(n, d);
    const int dh = c.head_dim();
    SaInputSplit out{Matrix::Zero(n * d, n * d), Matrix::Zero(n * d, n * d)};
    const int first = head < 0 ? 0 : head;
    const int last = head < 0 ? c.heads : head + 1;
    for (int i = first; i < last; ++i) {
        const Matrix g = params.blocks[layer].vo_product(i, dh);
        out.dominant += linalg::kron(g.transpose(), t.attention[i]);
        const Matrix a_prime = attention_input_jacobian(trace, params, c, layer, i);
        out.perturbation += detail::kron_identity((t.sa_input * g).transpose(), n) * a_prime;
    }
    return out;
}

/// K_l = d vec(SA(Xhat_{l-1})) / d vec(Xhat_{l-1}).
///
/// Evaluated in the factored product-rule form
///   sum_i (W_O,i^T kron I_n) [ (V_i^T kron I_n) A'_i + W_V,i^T kron A_i ],  V_i = Xhat W_V,i,
/// which is a different association from sa_input_split() and therefore an
/// independent check on it.
inline InputJacobian sa_input_jacobian(const ForwardTrace& trace, const NetworkParams& params, const ModelConfig& c,
                                       int layer) {
    detail::require_plain(c);
    const LayerTrace& t = detail::layer_of(trace, layer);
    const Index n = t.sa_input.rows();
    const Index d = t.sa_input.cols();
    detail::check_budget_nd(n, d);
    const int dh = c.head_dim();
    const BlockParams& p = params.blocks[layer];
    Matrix k = Matrix::Zero(n * d, n * d);
    for (int i = 0; i < c.heads; ++i) {
        const Matrix wv = p.wv.middleCols(i * dh, dh);
        const Matrix wo = p.wo.middleRows(i * dh, dh);
        const Matrix v = t.sa_input * wv;
        const Matrix a_prime = attention_input_jacobian(trace, params, c, layer, i);
        const Matrix inner =
            detail::kron_identity(v.transpose(), n) * a_prime + linalg::kron(wv.transpose(), t.attention[i]);
        k.noalias() += detail::kron_identity(wo.transpose(), n) * inner;
    }
    return {std::move(k), layer, InputKind::attention};
}

/// Khat_l = (W2^T kron I_n) diag(vec phi'(H)) (W1^T kron I_n).
inline InputJacobian mlp_input_jacobian(const ForwardTrace& trace, const NetworkParams& params, const ModelConfig& c,
                                        int layer) {
    detail::require_plain(c);
    if (!c.use_mlp) throw std::invalid_argument("mlp_input_jacobian: MLP sub-block is disabled");
    const LayerTrace& t = detail::layer_of(trace, layer);
    const Index n = t.mlp_input.rows();
    detail::check_budget_nd(n, t.mlp_input.cols());
    const BlockParams& p = params.blocks[layer];
    const Vector slope = linalg::vec(activate_grad(t.mlp_pre, c.activation));
    Matrix inner = detail::kron_identity(p.mlp_w1.transpose(), n);
    inner = slope.asDiagonal() * inner;
    Matrix k = detail::kron_identity(p.mlp_w2.transpose(), n) * inner;
    return {std::move(k), layer, InputKind::mlp};
}

/// Flattening used for attention parameter Jacobian columns.
inline Vector flatten_attention(const BlockParams& p) {
    const Index dd = p.wq.size();
    Vector v(4 * dd);
    v.segment(0, dd) = linalg::vec(p.wq);
    v.segment(dd, dd) = linalg::vec(p.wk);
    v.segment(2 * dd, dd) = linalg::vec(p.wv);
    v.segment(3 * dd, dd) = linalg::vec(p.wo);
    return v;
}

inline void unflatten_attention(const Vector& v, BlockParams& p) {
    const Index d = p.wq.rows();
    const Index dd = d * d;
    if (v.size() != 4 * dd) throw ShapeError("unflatten_attention: wrong length");
    p.wq = linalg::unvec(v.segment(0, dd), d, d);
    p.wk = linalg::unvec(v.segment(dd, dd), d, d);
    p.wv = linalg::unvec(v.segment(2 * dd, dd), d, d);
    p.wo = linalg::unvec(v.segment(3 * dd, dd), d, d);
}

inline Vector flatten_mlp(const BlockParams& p) {
    const Index a = p.mlp_w1.size(), b = p.mlp_b1.size(), cc = p.mlp_w2.size(), e = p.mlp_b2.size();
    Vector v(a + b + cc + e);
    v << linalg::vec(p.mlp_w1), p.mlp_b1, linalg::vec(p.mlp_w2), p.mlp_b2;
    return v;
}

inline void unflatten_mlp(const Vector& v, BlockParams& p) {
    const Index a = p.mlp_w1.size(), b = p.mlp_b1.size(), cc = p.mlp_w2.size(), e = p.mlp_b2.size();
    if (v.size() != a + b + cc + e) throw ShapeError("unflatten_mlp: wrong length");
    p.mlp_w1 = linalg::unvec(v.segment(0, a), p.mlp_w1.rows(), p.mlp_w1.cols());
    p.mlp_b1 = v.segment(a, b);
    p.mlp_w2 = linalg::unvec(v.segment(a + b, cc), p.mlp_w2.rows(), p.mlp_w2.cols());
    p.mlp_b2 = v.segment(a + b + cc, e);
}

/// d vec(SA output) / d [vec W_Q; vec W_K; vec W_V; vec W_O], nd x 4d^2.
inline ParamJacobian sa_param_jacobian(const ForwardTrace& trace, const NetworkParams& params, const ModelConfig& c,
                                       int layer) {
    detail::require_plain(c);
    const LayerTrace& t = detail::layer_of(trace, layer);
    const Matrix& x = t.sa_input;
    const Index n = x.rows();
    const Index d = x.cols();
    detail::check_budget_nd(n, d);
    const Index dd = d * d;
    const int dh = c.head_dim();
    const double s = c.attention_scale;
    const BlockParams& p = params.blocks[layer];
    const auto kdd = linalg::commutation_permutation(d, d);

    Matrix jac = Matrix::Zero(n * d, 4 * dd);
    Matrix concat(n, d);
    for (int i = 0; i < c.heads; ++i) {
        const Matrix& a = t.attention[i];
        const Matrix g = p.vo_product(i, dh);
        const Matrix through_softmax = detail::kron_identity((x * g).transpose(), n) * softmax_jacobian(a);

        Matrix xk = Matrix::Zero(n, d);
        xk.middleCols(i * dh, dh) = x * p.wk.middleCols(i * dh, dh);
        jac.middleCols(0, dd) += through_softmax * (linalg::kron(xk, x) / s);

        Matrix xq = Matrix::Zero(n, d);
        xq.middleCols(i * dh, dh) = x * p.wq.middleCols(i * dh, dh);
        jac.middleCols(dd, dd) += through_softmax * ((linalg::kron(x, xq) * kdd) / s);

        Matrix o_rows = Matrix::Zero(d, d);
        o_rows.middleRows(i * dh, dh) = p.wo.middleRows(i * dh, dh);
        jac.middleCols(2 * dd, dd) += linalg::kron(o_rows.transpose(), a * x);

        concat.middleCols(i * dh, dh) = a * x * p.wv.middleCols(i * dh, dh);
    }
    jac.middleCols(3 * dd, dd) = detail::identity_kron(d, concat);
    return {std::move(jac), layer, ParamTarget::attention};
}

/// d vec(MLP output) / d [vec W1; b1; vec W2; b2], nd x (2 d m + m + d).
inline ParamJacobian mlp_param_jacobian(const ForwardTrace& trace, const NetworkParams& params, const ModelConfig& c,
                                        int layer) {
    detail::require_plain(c);
    if (!c.use_mlp) throw std::invalid_argument("mlp_param_jacobian: MLP sub-block is disabled");
    const LayerTrace& t = detail::layer_of(trace, layer);
    const Matrix& u = t.mlp_input;
    const Index n = u.rows();
    const Index d = u.cols();
    detail::check_budget_nd(n, d);
    const BlockParams& p = params.blocks[layer];
    const Index m = p.mlp_w1.cols();
    const Vector slope = linalg::vec(activate_grad(t.mlp_pre, c.activation));
    const Matrix out_factor = detail::kron_identity(p.mlp_w2.transpose(), n) * slope.asDiagonal();
    const Matrix ones = Matrix::Ones(n, 1);

    Matrix jac(n * d, 2 * d * m + m + d);
    jac.middleCols(0, d * m) = out_factor * detail::identity_kron(m, u);
    jac.middleCols(d * m, m) = out_factor * detail::identity_kron(m, ones);
    jac.middleCols(d * m + m, m * d) = detail::identity_kron(d, activate(t.mlp_pre, c.activation));
    jac.middleCols(2 * d * m + m, d) = detail::identity_kron(d, ones);
    return {std::move(jac), layer, ParamTarget::mlp};
}

namespace detail {

/// Left-multiplies J by the attention factor of layer i: (K_i + I) with skips, K_i without.
inline void apply_sa_factor(Matrix& j, const ForwardTrace& tr, const NetworkParams& p, const ModelConfig& c, int i) {
    const Matrix k = sa_input_jacobian(tr, p, c, i).matrix;
    j = c.use_skip ? Matrix(k * j + j) : Matrix(k * j);
}

/// Left-multiplies J by the feed-forward factor of layer i; identity when the MLP is bypassed.
inline void apply_ffn_factor(Matrix& j, const ForwardTrace& tr, const NetworkParams& p, const ModelConfig& c, int i) {
    if (!c.use_mlp) return;
    const Matrix k = mlp_input_jacobian(tr, p, c, i).matrix;
    j = c.use_skip ? Matrix(k * j + j) : Matrix(k * j);
}

}  // namespace detail

/// d f(x) / d theta^(l) for one sample, through the chain of later layers:
///   skips:    prod_{i>l} {(Khat_i + I)(K_i + I)} (Khat_l + I) dSA/dtheta
///   skipless: prod_{i>l} (Khat_i K_i) Khat_l dSA/dtheta
/// The skip setting is taken from the config the trace was produced with.
inline ParamJacobian block_chain_jacobian(const ForwardTrace& trace, const NetworkParams& params, const ModelConfig& c,
                                          int layer, ParamTarget target = ParamTarget::attention) {
    const int depth = static_cast<int>(trace.layers.size());
    if (layer < 0 || layer >= depth) throw ShapeError("block_chain_jacobian: layer out of range");
    Matrix j;
    if (target == ParamTarget::attention) {
        j = sa_param_jacobian(trace, params, c, layer).matrix;
        detail::apply_ffn_factor(j, trace, params, c, layer);
    } else {
        j = mlp_param_jacobian(trace, params, c, layer).matrix;
    }
    for (int i = layer + 1; i < depth; ++i) {
        detail::apply_sa_factor(j, trace, params, c, i);
        detail::apply_ffn_factor(j, trace, params, c, i);
    }
    return {std::move(j), layer, target};
}

/// Vertical stack of per-sample chain Jacobians, rows in sample order.
inline ParamJacobian batch_param_jacobian(const std::vector<Matrix>& batch, const NetworkParams& params,
                                          const ModelConfig& c, int layer,
                                          ParamTarget target = ParamTarget::attention) {
    if (batch.empty()) throw std::invalid_argument("batch_param_jacobian: batch must be non-empty");
    std::vector<Matrix> parts;
    parts.reserve(batch.size());
    for (const Matrix& x : batch) parts.push_back(block_chain_jacobian(network_forward(x, params, c), params, c, layer, target).matrix);
    const Index rows = parts.front().rows();
    linalg::check_budget(rows * static_cast<Index>(parts.size()), parts.front().cols(), "batch_param_jacobian");
    Matrix stacked(rows * static_cast<Index>(parts.size()), parts.front().cols());
    for (std::size_t s = 0; s < parts.size(); ++s) stacked.middleRows(static_cast<Index>(s) * rows, rows) = parts[s];
    return {std::move(stacked), layer, target};
}

/// Full Jacobian [J_1, Jhat_1, ..., J_L, Jhat_L] of the stacked batch output.
inline Matrix network_param_jacobian(const std::vector<Matrix>& batch, const NetworkParams& params,
                                     const ModelConfig& c) {
    std::vector<Matrix> blocks;
    Index cols = 0;
    for (int l = 0; l < c.layers; ++l) {
        blocks.push_back(batch_param_jacobian(batch, params, c, l, ParamTarget::attention).matrix);
        cols += blocks.back().cols();
        if (c.use_mlp) {
            blocks.push_back(batch_param_jacobian(batch, params, c, l, ParamTarget::mlp).matrix);
            cols += blocks.back().cols();
        }
    }
    if (blocks.empty()) return Matrix();
    linalg::check_budget(blocks.front().rows(), cols, "network_param_jacobian");
    Matrix full(blocks.front().rows(), cols);
    Index at = 0;
    for (const Matrix& b : blocks) {
        full.middleCols(at, b.cols()) = b;
        at += b.cols();
    }
    return full;
}

}  // namespace skipless
