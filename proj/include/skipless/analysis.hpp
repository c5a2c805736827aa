#pragma once

// Numerical experiments on softmax conditioning, Gram-matrix moments, the
// dominant/perturbation split of K_l, the concatenation bound and per-layer
// conditioning profiles.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "skipless/init.hpp"
#include "skipless/jacobian.hpp"
#include "skipless/linalg.hpp"
#include "skipless/model.hpp"
#include "skipless/parallel.hpp"
#include "skipless/random.hpp"

namespace skipless {

/// Median of a copy; +inf entries sort last. NaN for an empty input.
inline double median(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + mid, v.end());
    const double hi = v[mid];
    if (v.size() % 2 == 1) return hi;
    const double lo = *std::max_element(v.begin(), v.begin() + mid);
    return std::isinf(hi) ? hi : 0.5 * (lo + hi);
}

// ---------------------------------------------------------------- softmax ---

struct Prop1Trial {
    int n = 0;
    double alpha = 0.0;
    double beta = 0.0;
    double temperature = 1.0;
    std::uint64_t seed = 0;
    double kappa = 1.0;   // +inf when numerically rank deficient
    double range = 0.0;   // max over rows of (row max - row min)
    double margin = 0.0;  // min over rows of (diagonal - max off-diagonal)
};

/// Max row range and min diagonal margin of a square logit matrix.
inline void row_statistics(const Matrix& m, double& range, double& margin) {
    range = 0.0;
    margin = std::numeric_limits<double>::infinity();
    for (Index i = 0; i < m.rows(); ++i) {
        range = std::max(range, m.row(i).maxCoeff() - m.row(i).minCoeff());
        double off = -std::numeric_limits<double>::infinity();
        for (Index j = 0; j < m.cols(); ++j)
            if (j != i) off = std::max(off, m(i, j));
        margin = std::min(margin, m(i, i) - off);
    }
}

/// kappa(row_softmax(alpha G + beta I, temperature)) for one Gaussian draw G.
inline Prop1Trial prop1_trial(int n, double alpha, double beta, double temperature, std::uint64_t seed) {
    if (n < 2) throw ShapeError("prop1_trial: n must be >= 2");
    Prop1Trial t{n, alpha, beta, temperature, seed};
    const Matrix m = alpha * gaussian_matrix(n, n, seed) + beta * Matrix::Identity(n, n);
    t.kappa = linalg::condition_number(row_softmax(m, temperature)).value;
    row_statistics(m, t.range, t.margin);
    return t;
}

/// Exact kappa of row_softmax(beta I, temperature): (e^{beta/t} + n - 1) / (e^{beta/t} - 1).
inline double softmax_identity_condition(int n, double beta, double temperature = 1.0) {
    if (!(beta > 0.0)) return std::numeric_limits<double>::infinity();
    const double e = std::exp(beta / temperature);
    return std::isinf(e) ? 1.0 : (e + n - 1.0) / (e - 1.0);
}

struct Prop1Summary {
    std::vector<Prop1Trial> trials;
    double median_kappa = 0.0;
    double median_range = 0.0;
    double median_margin = 0.0;
};

/// Independent trials with seeds derive_seed(seed, {i}).
inline Prop1Summary prop1_sweep(int n, double alpha, double beta, double temperature, int trials, std::uint64_t seed) {
    if (trials < 1) throw std::invalid_argument("prop1_sweep: trials must be >= 1");
    Prop1Summary s;
    s.trials.resize(trials);
    parallel_for(trials, [&](std::size_t i) {
        s.trials[i] = prop1_trial(n, alpha, beta, temperature, derive_seed(seed, {i}));
    });
    std::vector<double> k, r, g;
    for (const auto& t : s.trials) {
        k.push_back(t.kappa);
        r.push_back(t.range);
        g.push_back(t.margin);
    }
    s.median_kappa = median(k);
    s.median_range = median(r);
    s.median_margin = median(g);
    return s;
}

/// Median ||dvec(A)/dvec(X)||_2 per beta, with A = softmax(X P X^T) and
/// P = alpha Z + beta I (mimetic product, d_h = d). X and Z are fixed per seed.
inline std::vector<double> attention_derivative_trend(int n, int d, double alpha, const std::vector<double>& betas,
                                                      int seeds, std::uint64_t seed) {
    if (seeds < 1) throw std::invalid_argument("attention_derivative_trend: seeds must be >= 1");
    std::vector<std::vector<double>> norms(betas.size(), std::vector<double>(seeds));
    ModelConfig c;
    c.layers = 1;
    c.tokens = n;
    c.dim = d;
    c.heads = 1;
    c.attention_scale = 1.0;
    c.use_mlp = false;
    parallel_for(seeds, [&](std::size_t s) {
        const Matrix x = gaussian_matrix(n, d, derive_seed(seed, {s, 0}));
        NetworkParams net{{BlockParams::zeros(c)}};
        for (std::size_t b = 0; b < betas.size(); ++b) {
            MimeticPair qk = mimetic_qk(d, d, alpha, betas[b], derive_seed(seed, {s, 1}));
            net.blocks[0].wq = qk.wq;
            net.blocks[0].wk = qk.wk;
            const ForwardTrace t = network_forward(x, net, c);
            norms[b][s] = linalg::spectral_norm(attention_input_jacobian(t, net, c, 0, 0));
        }
    });
    std::vector<double> out;
    for (const auto& v : norms) out.push_back(median(v));
    return out;
}

// ---------------------------------------------------------------- moments ---

struct MomentStat {
    double mean = 0.0;
    double variance = 0.0;  // unbiased
};

/// Moments of A = X X^T, B = X Z X^T, C = alpha B + beta A, gamma = C_00 - C_01,
/// with X rows ~ N(0, I_d) and Z entries ~ N(0, 1/d). One (0,0) and one (0,1)
/// entry per trial so that samples are independent.
struct MomentReport {
    int d = 0;
    double alpha = 0.0;
    double beta = 0.0;
    int trials = 0;
    std::uint64_t seed = 0;
    MomentStat a_diag, a_off, b_diag, b_off, c_diag, c_off, gamma;

    double gamma_standard_error() const { return std::sqrt(gamma.variance / trials); }
};

/// The closed forms used for comparison: E[A_ii] = d, Var(A_ii) = 2d, Var(A_ij) = d,
/// Var(B_ii) = d + 2, Var(B_ij) = 1, E[C_ii] = beta d, Var(C_ii) = alpha^2 (d+2) + 2 beta^2 d,
/// Var(C_ij) = alpha^2 + beta^2 d, gamma ~ N(beta d, alpha^2 (d+3) + 3 beta^2 d).
struct MomentForms {
    double a_diag_mean, a_diag_var, a_off_var, b_diag_var, b_off_var, c_diag_mean, c_diag_var, c_off_var, gamma_mean,
        gamma_var;
};

inline MomentForms stated_moment_forms(int d, double alpha, double beta) {
    const double dd = d, a2 = alpha * alpha, b2 = beta * beta;
    return {dd, 2 * dd, dd, dd + 2, 1.0, beta * dd, a2 * (dd + 2) + 2 * b2 * dd, a2 + b2 * dd, beta * dd,
            a2 * (dd + 3) + 3 * b2 * dd};
}

/// Exact second moments for Gaussian X and Z (Var(B_ij) = d, Var(gamma) = alpha^2 (2d+2) + 3 beta^2 d).
inline MomentForms exact_moment_forms(int d, double alpha, double beta) {
    MomentForms f = stated_moment_forms(d, alpha, beta);
    const double dd = d, a2 = alpha * alpha, b2 = beta * beta;
    f.b_off_var = dd;
    f.c_off_var = a2 * dd + b2 * dd;
    f.gamma_var = a2 * (2 * dd + 2) + 3 * b2 * dd;
    return f;
}

inline MomentStat moment_stat(const std::vector<double>& v) {
    MomentStat s;
    const double n = static_cast<double>(v.size());
    for (double x : v) s.mean += x;
    s.mean /= n;
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.variance = v.size() > 1 ? ss / (n - 1.0) : 0.0;
    return s;
}

inline MomentReport gram_moments(int d, double alpha, double beta, int trials, std::uint64_t seed) {
    if (d < 1) throw ShapeError("gram_moments: d must be >= 1");
    if (trials < 2) throw std::invalid_argument("gram_moments: trials must be >= 2");
    enum { kA0, kA1, kB0, kB1, kCount };
    std::vector<std::vector<double>> v(kCount, std::vector<double>(trials));
    const double zstd = 1.0 / std::sqrt(static_cast<double>(d));
    parallel_for(trials, [&](std::size_t t) {
        Rng rng(derive_seed(seed, {t}));
        const Matrix x = gaussian_matrix(2, d, rng);
        const Matrix z = gaussian_matrix(d, d, rng, zstd);
        const Vector zx0 = z * x.row(0).transpose();
        const Vector ztx0 = z.transpose() * x.row(0).transpose();
        v[kA0][t] = x.row(0).squaredNorm();
        v[kA1][t] = x.row(0).dot(x.row(1));
        v[kB0][t] = x.row(0).dot(zx0);
        v[kB1][t] = ztx0.dot(x.row(1).transpose());
    });
    std::vector<double> c0(trials), c1(trials), g(trials);
    for (int t = 0; t < trials; ++t) {
        c0[t] = alpha * v[kB0][t] + beta * v[kA0][t];
        c1[t] = alpha * v[kB1][t] + beta * v[kA1][t];
        g[t] = c0[t] - c1[t];
    }
    MomentReport r;
    r.d = d;
    r.alpha = alpha;
    r.beta = beta;
    r.trials = trials;
    r.seed = seed;
    r.a_diag = moment_stat(v[kA0]);
    r.a_off = moment_stat(v[kA1]);
    r.b_diag = moment_stat(v[kB0]);
    r.b_off = moment_stat(v[kB1]);
    r.c_diag = moment_stat(c0);
    r.c_off = moment_stat(c1);
    r.gamma = moment_stat(g);
    return r;
}

// ----------------------------------------------------------- perturbation ---

struct PerturbationReport {
    int layer = 0;
    int head = -1;  // -1: all heads summed
    double e_norm = 0.0;
    double b_min = 0.0;
    double b_max = 0.0;
    double kappa_b = 1.0;
    double kappa_k = 1.0;
    double dominance = 0.0;  // ||E||_2 / sigma_min(B)
};

/// K_l = B_l + E_l with B_l the Kronecker (dominant) term and E_l the attention-derivative term.
inline PerturbationReport perturbation_split(const ForwardTrace& trace, const NetworkParams& params,
                                             const ModelConfig& c, int layer, int head = -1) {
    const SaInputSplit s = sa_input_split(trace, params, c, layer, head);
    PerturbationReport r;
    r.layer = layer;
    r.head = head;
    r.e_norm = linalg::spectral_norm(s.perturbation);
    const Vector sb = linalg::singular_values(s.dominant);
    r.b_max = sb(0);
    r.b_min = sb(sb.size() - 1);
    r.kappa_b = linalg::condition_from_values(sb).value;
    r.kappa_k = linalg::condition_number(s.dominant + s.perturbation).value;
    r.dominance = r.b_min > 0.0 ? r.e_norm / r.b_min : std::numeric_limits<double>::infinity();
    return r;
}

// ----------------------------------------------------------- concatenation ---

struct ConcatReport {
    double rho = 0.0;      // ||A^T B||_2
    double tau_bal = 1.0;  // ratio of the larger to the smaller spectral norm
    double s_max = 0.0;
    double s_min = 0.0;
    double kappa_max = 1.0;
    double bound = std::numeric_limits<double>::infinity();
    double actual = 1.0;  // kappa([A B])
    bool hypothesis_satisfied = false;  // rho < s_min^2
};

/// kappa([A B]) <= tau_bal sqrt((1 + rho/s_max^2) / (1 - rho/s_min^2)) kappa_max when rho < s_min^2.
inline ConcatReport concat_bound(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) throw ShapeError("concat_bound: A and B need the same number of rows");
    const Vector sa = linalg::singular_values(a);
    const Vector sb = linalg::singular_values(b);
    ConcatReport r;
    r.rho = linalg::spectral_norm(a.transpose() * b);
    const double amax = sa(0), bmax = sb(0);
    const double amin = sa(sa.size() - 1), bmin = sb(sb.size() - 1);
    r.s_max = std::max(amax, bmax);
    r.s_min = std::min(amin, bmin);
    r.tau_bal = std::min(amax, bmax) > 0.0 ? std::max(amax, bmax) / std::min(amax, bmax)
                                            : std::numeric_limits<double>::infinity();
    r.kappa_max = std::max(linalg::condition_from_values(sa).value, linalg::condition_from_values(sb).value);
    Matrix m(a.rows(), a.cols() + b.cols());
    m << a, b;
    r.actual = linalg::condition_number(m).value;
    r.hypothesis_satisfied = r.rho < r.s_min * r.s_min;
    if (r.hypothesis_satisfied) {
        const double num = 1.0 + r.rho / (r.s_max * r.s_max);
        const double den = 1.0 - r.rho / (r.s_min * r.s_min);
        r.bound = r.tau_bal * std::sqrt(num / den) * r.kappa_max;
    }
    return r;
}

struct ConcatTrialSummary {
    int accepted = 0;
    int attempts = 0;
    int violations = 0;
    double worst_ratio = 0.0;  // max actual / bound
    std::vector<ConcatReport> reports;
};

/// Random pairs A, B (rows x cols). B = s (G - t P_A G) with P_A the projector onto
/// range(A), t ~ U(0, 1) and s ~ U(0.5, 2), so the coherence rho spans a wide range;
/// draws that miss the hypothesis are rejected and redrawn.
inline ConcatTrialSummary concat_bound_trials(int trials, int rows, int cols, std::uint64_t seed,
                                              int max_attempts_per_trial = 1000) {
    if (rows < 2 * cols) throw ShapeError("concat_bound_trials: need rows >= 2 cols");
    ConcatTrialSummary out;
    out.reports.resize(trials);
    std::vector<int> attempts(trials, 0);
    parallel_for(trials, [&](std::size_t i) {
        Rng rng(derive_seed(seed, {i}));
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        for (int k = 0; k < max_attempts_per_trial; ++k) {
            ++attempts[i];
            const Matrix a = gaussian_matrix(rows, cols, rng);
            const Matrix g = gaussian_matrix(rows, cols, rng);
            const double t = unit(rng);
            const double s = 0.5 + 1.5 * unit(rng);
            const Eigen::HouseholderQR<Matrix> qr(a);
            const Matrix q = qr.householderQ() * Matrix::Identity(rows, cols);
            const Matrix b = s * (g - t * q * (q.transpose() * g));
            ConcatReport r = concat_bound(a, b);
            if (r.hypothesis_satisfied) {
                out.reports[i] = r;
                return;
            }
        }
        throw std::runtime_error("concat_bound_trials: no hypothesis-satisfying draw for trial " + std::to_string(i));
    });
    for (int i = 0; i < trials; ++i) {
        const ConcatReport& r = out.reports[i];
        ++out.accepted;
        out.attempts += attempts[i];
        const double ratio = r.actual / r.bound;
        out.worst_ratio = std::max(out.worst_ratio, ratio);
        if (r.actual > r.bound) ++out.violations;
    }
    return out;
}

// ------------------------------------------------------ layer conditioning ---

struct LayerConditionRow {
    std::string regime;
    int layer = 0;
    double kappa_k = 1.0;         // kappa(K_l)
    double kappa_k_plus_i = 1.0;  // kappa(K_l + I)
    double kappa_khat = 1.0;      // kappa(Khat_l); NaN when the MLP is bypassed
    double kappa_j = std::numeric_limits<double>::quiet_NaN();  // kappa of the batch attention-parameter Jacobian
    double dominance = 0.0;       // ||E_l||_2 / sigma_min(B_l)
};

/// Per-layer statistics for fixed weights. Input Jacobians use batch[0];
/// kappa_j uses the whole batch and is skipped when with_param_jacobian is false.
inline std::vector<LayerConditionRow> layer_conditions(const ModelConfig& c, const NetworkParams& params,
                                                       const std::vector<Matrix>& batch, const std::string& regime,
                                                       bool with_param_jacobian = true) {
    if (batch.empty()) throw std::invalid_argument("layer_conditions: batch must be non-empty");
    const ForwardTrace trace = network_forward(batch[0], params, c);
    std::vector<LayerConditionRow> rows(c.layers);
    parallel_for(c.layers, [&](std::size_t li) {
        const int l = static_cast<int>(li);
        LayerConditionRow& r = rows[li];
        r.regime = regime;
        r.layer = l;
        const SaInputSplit s = sa_input_split(trace, params, c, l);
        const Matrix k = s.dominant + s.perturbation;
        r.kappa_k = linalg::condition_number(k).value;
        r.kappa_k_plus_i = linalg::condition_number(k + Matrix::Identity(k.rows(), k.cols())).value;
        r.kappa_khat = c.use_mlp ? linalg::condition_number(mlp_input_jacobian(trace, params, c, l).matrix).value
                                 : std::numeric_limits<double>::quiet_NaN();
        const Vector sb = linalg::singular_values(s.dominant);
        const double bmin = sb(sb.size() - 1);
        r.dominance = bmin > 0.0 ? linalg::spectral_norm(s.perturbation) / bmin : std::numeric_limits<double>::infinity();
        if (with_param_jacobian)
            r.kappa_j = linalg::condition_number(batch_param_jacobian(batch, params, c, l).matrix).value;
    });
    return rows;
}

/// Gaussian N(0, input_std^2) token matrices drawn from derive_seed(seed, {kData, i}).
inline std::vector<Matrix> gaussian_batch(int count, int n, int d, std::uint64_t seed, double input_std = 1.0) {
    std::vector<Matrix> batch;
    for (int i = 0; i < count; ++i)
        batch.push_back(gaussian_matrix(n, d, derive_seed(seed, {0xda7a, static_cast<std::uint64_t>(i)}), input_std));
    return batch;
}

inline const char* const kRegimes[3] = {"skip+default", "skipless+default", "skipless+proposed"};

/// The three regimes on the same data and master seed: skip with default init,
/// skipless with default init, skipless with `proposed` (its scheme is forced to proposed).
inline std::vector<LayerConditionRow> layer_condition_profile(const ModelConfig& config, const InitSpec& proposed,
                                                              int batch_size, std::uint64_t seed,
                                                              bool with_param_jacobian = true,
                                                              double input_std = 1.0) {
    config.validate();
    if (batch_size < 1) throw std::invalid_argument("layer_condition_profile: batch_size must be >= 1");
    detail::check_budget_nd(config.tokens, config.dim);
    const std::vector<Matrix> batch = gaussian_batch(batch_size, config.tokens, config.dim, seed, input_std);
    InitSpec def = InitSpec::default_init(seed);
    def.trunc_std = proposed.trunc_std;
    def.trunc_bound = proposed.trunc_bound;
    InitSpec prop = proposed;
    prop.scheme = InitScheme::proposed;
    prop.seed = seed;

    std::vector<LayerConditionRow> out;
    for (int r = 0; r < 3; ++r) {
        ModelConfig c = config;
        c.use_skip = r == 0;
        const NetworkParams params = init_network(c, r == 2 ? prop : def);
        auto rows = layer_conditions(c, params, batch, kRegimes[r], with_param_jacobian);
        out.insert(out.end(), rows.begin(), rows.end());
    }
    return out;
}

// ------------------------------------------------------------ worst block ---

struct WorstBlockReport {
    double kappa_full = 1.0;
    std::vector<double> block_kappas;  // [attn_1, mlp_1, attn_2, ...]
    double kappa_max_block = 1.0;
};

/// kappa of the full parameter Jacobian next to the worst per-block kappa.
inline WorstBlockReport worst_block_check(const ModelConfig& c, const NetworkParams& params,
                                          const std::vector<Matrix>& batch) {
    WorstBlockReport r;
    r.kappa_full = linalg::condition_number(network_param_jacobian(batch, params, c)).value;
    for (int l = 0; l < c.layers; ++l) {
        r.block_kappas.push_back(
            linalg::condition_number(batch_param_jacobian(batch, params, c, l, ParamTarget::attention).matrix).value);
        if (c.use_mlp)
            r.block_kappas.push_back(
                linalg::condition_number(batch_param_jacobian(batch, params, c, l, ParamTarget::mlp).matrix).value);
    }
    r.kappa_max_block = r.block_kappas.empty() ? 1.0 : *std::max_element(r.block_kappas.begin(), r.block_kappas.end());
    return r;
}

}  // namespace skipless
