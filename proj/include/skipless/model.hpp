#pragma once

// Forward computation of transformer blocks, with or without skip connections.
//
//   with skips:    X_l = Xhat_{l-1} + SA(Xhat_{l-1}),   Xhat_l = X_l + MLP(X_l)
//   without skips: X_l = SA(Xhat_{l-1}),                Xhat_l = MLP(X_l)
//
// Multi-head attention is evaluated as sum_i A_i X W_V,i W_O,i, where W_V,i is the
// i-th column block of W_V (width d_h) and W_O,i the i-th row block of W_O.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "skipless/errors.hpp"
#include "skipless/linalg.hpp"

namespace skipless {

enum class Activation { gelu, relu, identity };

inline const char* to_string(Activation a) {
    switch (a) {
        case Activation::gelu: return "gelu";
        case Activation::relu: return "relu";
        case Activation::identity: return "identity";
    }
    return "?";
}

struct ModelConfig {
    int layers = 1;
    int tokens = 8;
    int dim = 16;
    int heads = 1;
    double attention_scale = 1.0;  // logits are divided by this
    Activation activation = Activation::gelu;
    bool use_skip = true;
    bool use_mlp = true;
    int mlp_hidden = 64;
    bool layer_norm = false;  // pre-norm on both sub-blocks; training only

    int head_dim() const { return dim / heads; }

    void validate() const {
        if (layers < 0) throw ShapeError("layers must be >= 0");
        if (tokens < 1 || dim < 1 || heads < 1 || mlp_hidden < 1)
            throw ShapeError("tokens, dim, heads and mlp_hidden must be >= 1");
        if (dim % heads != 0)
            throw ShapeError("dim " + std::to_string(dim) + " is not divisible by heads " + std::to_string(heads));
        if (!(attention_scale > 0.0)) throw ShapeError("attention_scale must be positive");
    }

    /// sqrt(d_h), the usual training-time logit divisor.
    static double default_scale(int dim, int heads) { return std::sqrt(static_cast<double>(dim / heads)); }
};

struct BlockParams {
    Matrix wq, wk, wv, wo;  // d x d each
    Matrix mlp_w1;          // d x hidden
    Vector mlp_b1;          // hidden
    Matrix mlp_w2;          // hidden x d
    Vector mlp_b2;          // d

    static BlockParams zeros(const ModelConfig& c) {
        BlockParams p;
        p.wq = p.wk = p.wv = p.wo = Matrix::Zero(c.dim, c.dim);
        p.mlp_w1 = Matrix::Zero(c.dim, c.mlp_hidden);
        p.mlp_b1 = Vector::Zero(c.mlp_hidden);
        p.mlp_w2 = Matrix::Zero(c.mlp_hidden, c.dim);
        p.mlp_b2 = Vector::Zero(c.dim);
        return p;
    }

    /// W_Q,i W_K,i^T for head i.
    Matrix qk_product(int head, int head_dim) const {
        return wq.middleCols(head * head_dim, head_dim) * wk.middleCols(head * head_dim, head_dim).transpose();
    }

    /// W_V,i W_O,i for head i.
    Matrix vo_product(int head, int head_dim) const {
        return wv.middleCols(head * head_dim, head_dim) * wo.middleRows(head * head_dim, head_dim);
    }

    bool operator==(const BlockParams&) const = default;
};

struct NetworkParams {
    std::vector<BlockParams> blocks;

    bool operator==(const NetworkParams&) const = default;
};

inline void check_shapes(const BlockParams& p, const ModelConfig& c) {
    const auto d = c.dim;
    auto need = [](bool ok, const char* name) {
        if (!ok) throw ShapeError(std::string("block parameter ") + name + " has wrong shape");
    };
    need(p.wq.rows() == d && p.wq.cols() == d, "W_Q");
    need(p.wk.rows() == d && p.wk.cols() == d, "W_K");
    need(p.wv.rows() == d && p.wv.cols() == d, "W_V");
    need(p.wo.rows() == d && p.wo.cols() == d, "W_O");
    if (c.use_mlp) {
        need(p.mlp_w1.rows() == d && p.mlp_w1.cols() == c.mlp_hidden, "mlp_W1");
        need(p.mlp_b1.size() == c.mlp_hidden, "mlp_b1");
        need(p.mlp_w2.rows() == c.mlp_hidden && p.mlp_w2.cols() == d, "mlp_W2");
        need(p.mlp_b2.size() == d, "mlp_b2");
    }
}

/// Row-wise softmax of M / temperature with the row max subtracted first.
inline Matrix row_softmax(const Matrix& m, double temperature = 1.0) {
    if (!(temperature > 0.0)) throw std::invalid_argument("row_softmax: temperature must be positive");
    Matrix out(m.rows(), m.cols());
    for (Index i = 0; i < m.rows(); ++i) {
        const double mx = m.row(i).maxCoeff();
        out.row(i) = ((m.row(i).array() - mx) / temperature).exp();
        out.row(i) /= out.row(i).sum();
    }
    return out;
}

/// X W_Q,i W_K,i^T X^T / scale for one head.
inline Matrix attention_logits(const Matrix& x, const BlockParams& p, int head, const ModelConfig& c) {
    if (head < 0 || head >= c.heads)
        throw ShapeError("head index " + std::to_string(head) + " out of range [0, " + std::to_string(c.heads) + ")");
    const int dh = c.head_dim();
    const Matrix q = x * p.wq.middleCols(head * dh, dh);
    const Matrix k = x * p.wk.middleCols(head * dh, dh);
    return q * k.transpose() / c.attention_scale;
}

namespace detail {

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

}  // namespace detail

inline Matrix activate(const Matrix& h, Activation a) {
    switch (a) {
        case Activation::gelu: return h.unaryExpr([](double v) { return detail::gelu(v); });
        case Activation::relu: return h.cwiseMax(0.0);
        case Activation::identity: return h;
    }
    return h;
}

inline Matrix activate_grad(const Matrix& h, Activation a) {
    switch (a) {
        case Activation::gelu: return h.unaryExpr([](double v) { return detail::gelu_grad(v); });
        case Activation::relu: return h.unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.0; });
        case Activation::identity: return Matrix::Ones(h.rows(), h.cols());
    }
    return h;
}

/// Row-wise normalization without affine parameters.
inline constexpr double kLayerNormEps = 1e-6;

inline Matrix layer_norm(const Matrix& x) {
    Matrix y(x.rows(), x.cols());
    for (Index i = 0; i < x.rows(); ++i) {
        const double mu = x.row(i).mean();
        const double var = (x.row(i).array() - mu).square().mean();
        y.row(i) = (x.row(i).array() - mu) / std::sqrt(var + kLayerNormEps);
    }
    return y;
}

/// Everything a single block computed; the Jacobian module reads from here.
struct LayerTrace {
    Matrix input;                   // Xhat_{l-1}
    Matrix sa_input;                // input after optional normalization
    std::vector<Matrix> logits;     // per head
    std::vector<Matrix> attention;  // per head, row-stochastic
    Matrix attn_out;                // X_l
    Matrix mlp_input;               // X_l after optional normalization
    Matrix mlp_pre;                 // pre-activation H = X_l W1 + 1 b1^T
    Matrix output;                  // Xhat_l
};

struct ForwardTrace {
    Matrix input;
    std::vector<LayerTrace> layers;

    const Matrix& output() const { return layers.empty() ? input : layers.back().output; }
};

/// Multi-head self-attention; fills per-head logits/attention when requested.
inline Matrix self_attention(const Matrix& x, const BlockParams& p, const ModelConfig& c,
                             std::vector<Matrix>* logits = nullptr, std::vector<Matrix>* attention = nullptr) {
    const int dh = c.head_dim();
    Matrix out = Matrix::Zero(x.rows(), c.dim);
    for (int i = 0; i < c.heads; ++i) {
        Matrix m = attention_logits(x, p, i, c);
        Matrix a = row_softmax(m);
        out.noalias() += a * (x * p.wv.middleCols(i * dh, dh)) * p.wo.middleRows(i * dh, dh);
        if (logits) logits->push_back(std::move(m));
        if (attention) attention->push_back(std::move(a));
    }
    return out;
}

/// phi(X W1 + 1 b1^T) W2 + 1 b2^T.
inline Matrix mlp(const Matrix& x, const BlockParams& p, Activation act, Matrix* pre = nullptr) {
    Matrix h = x * p.mlp_w1;
    h.rowwise() += p.mlp_b1.transpose();
    Matrix y = activate(h, act) * p.mlp_w2;
    y.rowwise() += p.mlp_b2.transpose();
    if (pre) *pre = std::move(h);
    return y;
}

inline LayerTrace block_forward(const Matrix& x, const BlockParams& p, const ModelConfig& c) {
    check_shapes(p, c);
    if (x.cols() != c.dim) throw ShapeError("block_forward: token matrix has " + std::to_string(x.cols()) + " columns");
    LayerTrace t;
    t.input = x;
    t.sa_input = c.layer_norm ? layer_norm(x) : x;
    t.attn_out = self_attention(t.sa_input, p, c, &t.logits, &t.attention);
    if (c.use_skip) t.attn_out += x;
    if (c.use_mlp) {
        t.mlp_input = c.layer_norm ? layer_norm(t.attn_out) : t.attn_out;
        t.output = mlp(t.mlp_input, p, c.activation, &t.mlp_pre);
        if (c.use_skip) t.output += t.attn_out;
    } else {
        t.output = t.attn_out;
    }
    return t;
}

/// Applies every block in order. Throws DivergenceError (1-based layer) as soon as
/// an intermediate becomes non-finite.
inline ForwardTrace network_forward(const Matrix& x0, const NetworkParams& params, const ModelConfig& c) {
    c.validate();
    if (static_cast<int>(params.blocks.size()) != c.layers)
        throw ShapeError("network has " + std::to_string(params.blocks.size()) + " blocks, config says " +
                         std::to_string(c.layers));
    if (x0.rows() != c.tokens || x0.cols() != c.dim) throw ShapeError("network_forward: input shape mismatch");
    ForwardTrace trace;
    trace.input = x0;
    trace.layers.reserve(params.blocks.size());
    const Matrix* current = &trace.input;
    for (int l = 0; l < c.layers; ++l) {
        trace.layers.push_back(block_forward(*current, params.blocks[l], c));
        const LayerTrace& t = trace.layers.back();
        if (!t.attn_out.allFinite()) throw DivergenceError(l + 1, "self-attention output is non-finite");
        if (!t.output.allFinite()) throw DivergenceError(l + 1, "MLP output is non-finite");
        current = &t.output;
    }
    return trace;
}

}  // namespace skipless
