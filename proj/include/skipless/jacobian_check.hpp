#pragma once

// Finite-difference verification of every analytic Jacobian. The reference side of
// each check only calls forward functions from model.hpp, never the analytic code.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "skipless/jacobian.hpp"
#include "skipless/model.hpp"
#include "skipless/random.hpp"

namespace skipless {

struct JacobianCheckOptions {
    int tokens = 6;
    int dim = 8;
    int heads = 1;
    int layers = 3;  // depth used by the chain checks
    int seeds = 20;
    std::uint64_t seed = 0;
    double tolerance = 1e-5;
    bool randomize_shapes = false;  // draw n in [2, tokens], d in heads*[1, dim/heads] per seed
};

struct JacobianCheckResult {
    std::string check;
    int instance = 0;
    int tokens = 0;
    int dim = 0;
    int heads = 0;
    double rel_error = 0.0;
    bool passed = false;
};

/// Random weights that keep attention away from both the uniform and the hard regime.
inline NetworkParams random_network(const ModelConfig& c, std::uint64_t seed) {
    NetworkParams net;
    const double d = c.dim;
    for (int l = 0; l < c.layers; ++l) {
        auto s = [&](std::uint64_t t) { return derive_seed(seed, {static_cast<std::uint64_t>(l), t}); };
        BlockParams p;
        p.wq = gaussian_matrix(c.dim, c.dim, s(0), 1.0 / std::sqrt(d));
        p.wk = gaussian_matrix(c.dim, c.dim, s(1), 1.0 / std::sqrt(d));
        p.wv = gaussian_matrix(c.dim, c.dim, s(2), 1.0 / std::sqrt(d));
        p.wo = gaussian_matrix(c.dim, c.dim, s(3), 1.0 / std::sqrt(d));
        p.mlp_w1 = gaussian_matrix(c.dim, c.mlp_hidden, s(4), 1.0 / std::sqrt(d));
        p.mlp_b1 = gaussian_matrix(c.mlp_hidden, 1, s(5), 0.1);
        p.mlp_w2 = gaussian_matrix(c.mlp_hidden, c.dim, s(6), 1.0 / std::sqrt(static_cast<double>(c.mlp_hidden)));
        p.mlp_b2 = gaussian_matrix(c.dim, 1, s(7), 0.1);
        net.blocks.push_back(std::move(p));
    }
    return net;
}

namespace detail {

inline ModelConfig check_config(int n, int d, int heads, int layers, bool skip) {
    ModelConfig c;
    c.layers = layers;
    c.tokens = n;
    c.dim = d;
    c.heads = heads;
    c.attention_scale = ModelConfig::default_scale(d, heads);
    c.activation = Activation::gelu;
    c.use_skip = skip;
    c.use_mlp = true;
    c.mlp_hidden = 2 * d;
    return c;
}

}  // namespace detail

/// Runs all checks for one random instance and appends the outcomes.
inline void run_jacobian_instance(int instance, int n, int d, int heads, const JacobianCheckOptions& opt,
                                  std::vector<JacobianCheckResult>& out) {
    const std::uint64_t seed = derive_seed(opt.seed, {static_cast<std::uint64_t>(instance)});
    auto record = [&](const std::string& name, const Matrix& analytic, const Matrix& reference) {
        const double err = relative_error(analytic, reference);
        out.push_back({name, instance, n, d, heads, err, err <= opt.tolerance});
    };

    const ModelConfig one = detail::check_config(n, d, heads, 1, false);
    const NetworkParams net = random_network(one, seed);
    const Matrix x = gaussian_matrix(n, d, derive_seed(seed, {100}));
    const ForwardTrace trace = network_forward(x, net, one);
    const BlockParams& blk = net.blocks[0];

    {
        const Matrix logits = gaussian_matrix(n, n, derive_seed(seed, {101}));
        const Matrix fd = finite_difference_jacobian(
            [n](const Vector& v) { return linalg::vec(row_softmax(linalg::unvec(v, n, n))); }, linalg::vec(logits));
        record("softmax", softmax_jacobian(row_softmax(logits)), fd);
    }
    {
        const Matrix p = gaussian_matrix(d, d, derive_seed(seed, {102}), 1.0 / std::sqrt(static_cast<double>(d)));
        const double s = one.attention_scale;
        const Matrix fd = finite_difference_jacobian(
            [&](const Vector& v) {
                const Matrix xx = linalg::unvec(v, n, d);
                return linalg::vec(Matrix(xx * p * xx.transpose() / s));
            },
            linalg::vec(x));
        record("logits_input", logits_input_jacobian(x, p, s), fd);
    }
    for (int h = 0; h < heads; ++h) {
        const Matrix fd = finite_difference_jacobian(
            [&](const Vector& v) {
                return linalg::vec(row_softmax(attention_logits(linalg::unvec(v, n, d), blk, h, one)));
            },
            linalg::vec(x));
        record("attention_input", attention_input_jacobian(trace, net, one, 0, h), fd);
    }
    {
        const Matrix fd = finite_difference_jacobian(
            [&](const Vector& v) { return linalg::vec(self_attention(linalg::unvec(v, n, d), blk, one)); },
            linalg::vec(x));
        record("sa_input", sa_input_jacobian(trace, net, one, 0).matrix, fd);
        const SaInputSplit split = sa_input_split(trace, net, one, 0);
        record("sa_input_split", split.dominant + split.perturbation, fd);
    }
    {
        const Matrix& u = trace.layers[0].mlp_input;
        const Matrix fd = finite_difference_jacobian(
            [&](const Vector& v) { return linalg::vec(mlp(linalg::unvec(v, n, d), blk, one.activation)); },
            linalg::vec(u));
        record("mlp_input", mlp_input_jacobian(trace, net, one, 0).matrix, fd);
    }
    {
        const Matrix fd = finite_difference_jacobian(
            [&](const Vector& theta) {
                BlockParams q = blk;
                unflatten_attention(theta, q);
                return linalg::vec(self_attention(x, q, one));
            },
            flatten_attention(blk));
        record("sa_param", sa_param_jacobian(trace, net, one, 0).matrix, fd);
    }
    {
        const Matrix fd = finite_difference_jacobian(
            [&](const Vector& theta) {
                BlockParams q = blk;
                unflatten_mlp(theta, q);
                return linalg::vec(mlp(trace.layers[0].mlp_input, q, one.activation));
            },
            flatten_mlp(blk));
        record("mlp_param", mlp_param_jacobian(trace, net, one, 0).matrix, fd);
    }
    for (bool skip : {true, false}) {
        const ModelConfig deep = detail::check_config(n, d, heads, opt.layers, skip);
        const NetworkParams dnet = random_network(deep, derive_seed(seed, {200}));
        const ForwardTrace dtrace = network_forward(x, dnet, deep);
        for (ParamTarget target : {ParamTarget::attention, ParamTarget::mlp}) {
            const bool attn = target == ParamTarget::attention;
            const Matrix fd = finite_difference_jacobian(
                [&](const Vector& theta) {
                    NetworkParams q = dnet;
                    if (attn)
                        unflatten_attention(theta, q.blocks[0]);
                    else
                        unflatten_mlp(theta, q.blocks[0]);
                    return linalg::vec(network_forward(x, q, deep).output());
                },
                attn ? flatten_attention(dnet.blocks[0]) : flatten_mlp(dnet.blocks[0]));
            const std::string name = std::string(attn ? "chain_attention" : "chain_mlp") + (skip ? "_skip" : "_skipless");
            record(name, block_chain_jacobian(dtrace, dnet, deep, 0, target).matrix, fd);
        }
    }
}

inline std::vector<JacobianCheckResult> run_jacobian_checks(const JacobianCheckOptions& opt) {
    std::vector<JacobianCheckResult> out;
    Rng shapes(derive_seed(opt.seed, {0xfeed}));
    for (int i = 0; i < opt.seeds; ++i) {
        int n = opt.tokens;
        int d = opt.dim;
        if (opt.randomize_shapes) {
            n = std::uniform_int_distribution<int>(2, opt.tokens)(shapes);
            d = opt.heads * std::uniform_int_distribution<int>(1, opt.dim / opt.heads)(shapes);
        }
        run_jacobian_instance(i, n, d, opt.heads, opt, out);
    }
    return out;
}

}  // namespace skipless
