#pragma once

// Toy training: synthetic classification data, a binary tensor format, a manual
// backward pass, SGD-momentum and Adam with decoupled weight decay.
//
// Model: tokens -> blocks -> mean over tokens -> linear head -> cross-entropy.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "skipless/analysis.hpp"
#include "skipless/errors.hpp"
#include "skipless/init.hpp"
#include "skipless/model.hpp"
#include "skipless/random.hpp"

namespace skipless {

static_assert(std::endian::native == std::endian::little, "tensor files are read and written little-endian");

struct Dataset {
    std::vector<Matrix> samples;  // n x d each
    std::vector<int> labels;
    int class_count = 0;
    int n = 0;
    int d = 0;

    std::size_t size() const { return samples.size(); }
};

/// Class c owns template T_c (n x d); the vec(T_c) are orthonormal and scaled by
/// sqrt(n d) so entries have unit mean square. Samples are T_y + noise * N(0, 1).
struct SynthTask {
    Dataset data;
    std::vector<Matrix> templates;
};

inline SynthTask synth_task(int n, int d, int class_count, int samples, double noise, std::uint64_t seed) {
    if (class_count < 2) throw std::invalid_argument("synth_task: class_count must be >= 2");
    if (n < 1 || d < 1 || samples < 1) throw ShapeError("synth_task: n, d and samples must be >= 1");
    if (class_count > n * d) throw ShapeError("synth_task: class_count exceeds n*d");
    if (!(noise >= 0.0)) throw std::invalid_argument("synth_task: noise must be >= 0");
    SynthTask t;
    const Index nd = static_cast<Index>(n) * d;
    const Matrix g = gaussian_matrix(nd, class_count, derive_seed(seed, {0}));
    const Eigen::HouseholderQR<Matrix> qr(g);
    const Matrix q = qr.householderQ() * Matrix::Identity(nd, class_count);
    for (int c = 0; c < class_count; ++c)
        t.templates.push_back(linalg::unvec(q.col(c) * std::sqrt(static_cast<double>(nd)), n, d));
    Rng rng(derive_seed(seed, {1}));
    std::uniform_int_distribution<int> label(0, class_count - 1);
    t.data.class_count = class_count;
    t.data.n = n;
    t.data.d = d;
    for (int i = 0; i < samples; ++i) {
        const int y = label(rng);
        Matrix x = t.templates[y];
        if (noise > 0.0) x += gaussian_matrix(n, d, rng, noise);
        t.data.samples.push_back(std::move(x));
        t.data.labels.push_back(y);
    }
    return t;
}

/// Fraction of samples whose nearest template (Frobenius) is their own class.
inline double nearest_template_accuracy(const SynthTask& t) {
    int correct = 0;
    for (std::size_t i = 0; i < t.data.size(); ++i) {
        int best = 0;
        double best_dist = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < t.templates.size(); ++c) {
            const double dist = (t.data.samples[i] - t.templates[c]).squaredNorm();
            if (dist < best_dist) {
                best_dist = dist;
                best = static_cast<int>(c);
            }
        }
        correct += best == t.data.labels[i];
    }
    return static_cast<double>(correct) / static_cast<double>(t.data.size());
}

// ------------------------------------------------------------ tensor file ---
//
// "SKLS", u32 version = 1, u32 sample_count, n, d, class_count,
// sample_count * n * d f64 (sample-major, column-major per matrix), sample_count u32 labels.

inline constexpr std::array<char, 4> kTensorMagic{'S', 'K', 'L', 'S'};
inline constexpr std::uint32_t kTensorVersion = 1;

inline void write_tensor_file(const std::string& path, const Dataset& ds) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    auto u32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); };
    out.write(kTensorMagic.data(), kTensorMagic.size());
    u32(kTensorVersion);
    u32(static_cast<std::uint32_t>(ds.size()));
    u32(static_cast<std::uint32_t>(ds.n));
    u32(static_cast<std::uint32_t>(ds.d));
    u32(static_cast<std::uint32_t>(ds.class_count));
    for (const Matrix& x : ds.samples) {
        if (x.rows() != ds.n || x.cols() != ds.d) throw ShapeError("write_tensor_file: sample shape mismatch");
        out.write(reinterpret_cast<const char*>(x.data()), static_cast<std::streamsize>(x.size() * sizeof(double)));
    }
    for (int y : ds.labels) u32(static_cast<std::uint32_t>(y));
    if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

inline Dataset load_tensor_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::size_t at = 0;
    auto take = [&](void* dst, std::size_t count, const char* field) {
        if (bytes.size() - at < count)
            throw FormatError(field, path + ": truncated file while reading " + field);
        std::memcpy(dst, bytes.data() + at, count);
        at += count;
    };
    std::array<char, 4> magic{};
    take(magic.data(), 4, "magic");
    if (magic != kTensorMagic) throw FormatError("magic", path + ": bad magic, expected SKLS");
    std::uint32_t header[5];
    const char* names[5] = {"version", "sample_count", "n", "d", "class_count"};
    for (int i = 0; i < 5; ++i) take(&header[i], 4, names[i]);
    if (header[0] != kTensorVersion)
        throw FormatError("version", path + ": unsupported version " + std::to_string(header[0]));
    const std::uint64_t count = header[1], n = header[2], d = header[3], classes = header[4];
    if (n == 0) throw FormatError("n", path + ": n must be >= 1");
    if (d == 0) throw FormatError("d", path + ": d must be >= 1");
    if (classes < 2) throw FormatError("class_count", path + ": class_count must be >= 2");
    const std::uint64_t expected = count * n * d * sizeof(double) + count * sizeof(std::uint32_t);
    const std::uint64_t remaining = bytes.size() - at;
    if (remaining != expected) {
        // Attribute the mismatch to the first header field that explains it.
        auto fits = [&](std::uint64_t cnt, std::uint64_t nn, std::uint64_t dd) {
            return cnt * nn * dd * sizeof(double) + cnt * sizeof(std::uint32_t) == remaining;
        };
        for (std::uint64_t k = 1; k <= 4096; ++k) {
            if (k != n && fits(count, k, d))
                throw FormatError("n", path + ": payload size does not match header n=" + std::to_string(n));
            if (k != d && fits(count, n, k))
                throw FormatError("d", path + ": payload size does not match header d=" + std::to_string(d));
        }
        if (remaining < expected)
            throw FormatError("payload", path + ": truncated payload (" + std::to_string(remaining) + " of " +
                                             std::to_string(expected) + " bytes)");
        throw FormatError("payload", path + ": " + std::to_string(remaining - expected) + " trailing bytes");
    }
    Dataset ds;
    ds.n = static_cast<int>(n);
    ds.d = static_cast<int>(d);
    ds.class_count = static_cast<int>(classes);
    for (std::uint64_t s = 0; s < count; ++s) {
        Matrix x(ds.n, ds.d);
        take(x.data(), static_cast<std::size_t>(n * d * sizeof(double)), "payload");
        if (!x.allFinite()) throw NonFiniteError(path + ": non-finite entry in sample " + std::to_string(s));
        ds.samples.push_back(std::move(x));
    }
    for (std::uint64_t s = 0; s < count; ++s) {
        std::uint32_t y;
        take(&y, 4, "labels");
        if (y >= classes) throw FormatError("labels", path + ": label " + std::to_string(y) + " >= class_count");
        ds.labels.push_back(static_cast<int>(y));
    }
    return ds;
}

// -------------------------------------------------------------- training ---

struct HeadParams {
    Matrix w;  // d x classes
    Vector b;  // classes

    bool operator==(const HeadParams&) const = default;
};

struct TrainableParams {
    NetworkParams net;
    HeadParams head;

    bool operator==(const TrainableParams&) const = default;
};

/// Flat layout: per block [vec W_Q, vec W_K, vec W_V, vec W_O, vec W1, b1, vec W2, b2], then [vec W_head, b_head].
inline Vector flatten(const TrainableParams& p) {
    Index total = p.head.w.size() + p.head.b.size();
    for (const BlockParams& b : p.net.blocks) total += 4 * b.wq.size() + b.mlp_w1.size() + b.mlp_b1.size() + b.mlp_w2.size() + b.mlp_b2.size();
    Vector v(total);
    Index at = 0;
    auto put = [&](const auto& m) {
        v.segment(at, m.size()) = Eigen::Map<const Vector>(m.data(), m.size());
        at += m.size();
    };
    for (const BlockParams& b : p.net.blocks) {
        put(b.wq), put(b.wk), put(b.wv), put(b.wo), put(b.mlp_w1), put(b.mlp_b1), put(b.mlp_w2), put(b.mlp_b2);
    }
    put(p.head.w), put(p.head.b);
    return v;
}

inline void unflatten(const Vector& v, TrainableParams& p) {
    Index at = 0;
    auto get = [&](auto& m) {
        if (at + m.size() > v.size()) throw ShapeError("unflatten: vector too short");
        std::copy(v.data() + at, v.data() + at + m.size(), m.data());
        at += m.size();
    };
    for (BlockParams& b : p.net.blocks) {
        get(b.wq), get(b.wk), get(b.wv), get(b.wo), get(b.mlp_w1), get(b.mlp_b1), get(b.mlp_w2), get(b.mlp_b2);
    }
    get(p.head.w), get(p.head.b);
    if (at != v.size()) throw ShapeError("unflatten: vector too long");
}

/// 64-bit FNV-1a over the little-endian bytes of the flattened parameters.
inline std::uint64_t digest(const TrainableParams& p) {
    const Vector v = flatten(p);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    const auto* bytes = reinterpret_cast<const unsigned char*>(v.data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(v.size()) * sizeof(double); ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace detail {

/// Backward of row-wise normalization without affine parameters.
inline Matrix layer_norm_backward(const Matrix& x, const Matrix& dy) {
    Matrix dx(x.rows(), x.cols());
    for (Index i = 0; i < x.rows(); ++i) {
        const double mu = x.row(i).mean();
        const double sigma = std::sqrt((x.row(i).array() - mu).square().mean() + kLayerNormEps);
        const Eigen::RowVectorXd y = (x.row(i).array() - mu) / sigma;
        const double mean_dy = dy.row(i).mean();
        const double mean_dyy = (dy.row(i).array() * y.array()).mean();
        dx.row(i) = (dy.row(i).array() - mean_dy - y.array() * mean_dyy) / sigma;
    }
    return dx;
}

inline double log_softmax_at(const Eigen::RowVectorXd& z, int label, Eigen::RowVectorXd* probs) {
    const double mx = z.maxCoeff();
    const Eigen::RowVectorXd e = (z.array() - mx).exp();
    const double sum = e.sum();
    if (probs) *probs = e / sum;
    return z(label) - mx - std::log(sum);
}

}  // namespace detail

inline Eigen::RowVectorXd head_logits(const Matrix& out, const HeadParams& head) {
    return out.colwise().mean() * head.w + head.b.transpose();
}

/// Cross-entropy of one sample.
inline double sample_loss(const Matrix& x, int label, const TrainableParams& p, const ModelConfig& c) {
    const ForwardTrace t = network_forward(x, p.net, c);
    return -detail::log_softmax_at(head_logits(t.output(), p.head), label, nullptr);
}

/// Mean cross-entropy over `indices` (all samples when empty).
inline double dataset_loss(const Dataset& ds, const TrainableParams& p, const ModelConfig& c,
                           const std::vector<std::size_t>& indices = {}) {
    double total = 0.0;
    const std::size_t count = indices.empty() ? ds.size() : indices.size();
    for (std::size_t k = 0; k < count; ++k) {
        const std::size_t i = indices.empty() ? k : indices[k];
        total += sample_loss(ds.samples[i], ds.labels[i], p, c);
    }
    return total / static_cast<double>(count);
}

inline TrainableParams zero_like(const TrainableParams& p) {
    TrainableParams g = p;
    for (BlockParams& b : g.net.blocks) {
        b.wq.setZero(), b.wk.setZero(), b.wv.setZero(), b.wo.setZero();
        b.mlp_w1.setZero(), b.mlp_b1.setZero(), b.mlp_w2.setZero(), b.mlp_b2.setZero();
    }
    g.head.w.setZero();
    g.head.b.setZero();
    return g;
}

/// Loss of one sample; gradients are accumulated (scaled by `weight`) into `grad`.
inline double accumulate_gradient(const Matrix& x, int label, const TrainableParams& p, const ModelConfig& c,
                                  double weight, TrainableParams& grad) {
    const ForwardTrace t = network_forward(x, p.net, c);
    const Matrix& out = t.output();
    const Eigen::RowVectorXd pooled = out.colwise().mean();
    const Eigen::RowVectorXd z = pooled * p.head.w + p.head.b.transpose();
    Eigen::RowVectorXd probs;
    const double loss = -detail::log_softmax_at(z, label, &probs);
    if (!std::isfinite(loss)) return loss;

    Eigen::RowVectorXd dz = probs;
    dz(label) -= 1.0;
    dz *= weight;
    grad.head.w.noalias() += pooled.transpose() * dz;
    grad.head.b += dz.transpose();
    Matrix dout = Matrix::Ones(out.rows(), 1) * ((dz * p.head.w.transpose()) / static_cast<double>(out.rows()));

    const int dh = c.head_dim();
    for (int l = c.layers - 1; l >= 0; --l) {
        const LayerTrace& lt = t.layers[l];
        const BlockParams& bp = p.net.blocks[l];
        BlockParams& gb = grad.net.blocks[l];
        Matrix d_attn;
        if (c.use_mlp) {
            const Matrix act = activate(lt.mlp_pre, c.activation);
            gb.mlp_w2.noalias() += act.transpose() * dout;
            gb.mlp_b2 += dout.colwise().sum().transpose();
            const Matrix dpre = (dout * bp.mlp_w2.transpose()).cwiseProduct(activate_grad(lt.mlp_pre, c.activation));
            gb.mlp_w1.noalias() += lt.mlp_input.transpose() * dpre;
            gb.mlp_b1 += dpre.colwise().sum().transpose();
            Matrix dv = dpre * bp.mlp_w1.transpose();
            d_attn = c.layer_norm ? detail::layer_norm_backward(lt.attn_out, dv) : dv;
            if (c.use_skip) d_attn += dout;
        } else {
            d_attn = dout;
        }
        const Matrix& u = lt.sa_input;
        Matrix du = Matrix::Zero(u.rows(), u.cols());
        for (int h = 0; h < c.heads; ++h) {
            const auto cols = Eigen::seqN(h * dh, dh);
            const Matrix& a = lt.attention[h];
            const Matrix q = u * bp.wq(Eigen::all, cols);
            const Matrix k = u * bp.wk(Eigen::all, cols);
            const Matrix v = u * bp.wv(Eigen::all, cols);
            const Matrix av = a * v;
            gb.wo(cols, Eigen::all) += av.transpose() * d_attn;
            const Matrix d_av = d_attn * bp.wo(cols, Eigen::all).transpose();
            const Matrix da = d_av * v.transpose();
            const Matrix dv = a.transpose() * d_av;
            Matrix dm = a.cwiseProduct(da);
            dm -= a.cwiseProduct(dm.rowwise().sum() * Eigen::RowVectorXd::Ones(a.cols()));
            dm /= c.attention_scale;
            const Matrix dq = dm * k;
            const Matrix dk = dm.transpose() * q;
            gb.wq(Eigen::all, cols) += u.transpose() * dq;
            gb.wk(Eigen::all, cols) += u.transpose() * dk;
            gb.wv(Eigen::all, cols) += u.transpose() * dv;
            du.noalias() += dq * bp.wq(Eigen::all, cols).transpose() + dk * bp.wk(Eigen::all, cols).transpose() +
                            dv * bp.wv(Eigen::all, cols).transpose();
        }
        Matrix dx = c.layer_norm ? detail::layer_norm_backward(lt.input, du) : du;
        if (c.use_skip) dx += d_attn;
        dout = std::move(dx);
    }
    return loss;
}

enum class OptimizerKind { sgd_momentum, adam_decoupled };

inline const char* to_string(OptimizerKind o) { return o == OptimizerKind::sgd_momentum ? "sgd_momentum" : "adam_decoupled"; }

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::adam_decoupled;
    double lr = 1e-3;
    double weight_decay = 0.0;
    double momentum = 0.9;  // sgd_momentum
    double beta1 = 0.9;     // adam_decoupled
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct OptimizerState {
    long step = 0;
    Vector m;  // momentum buffer / first moment
    Vector v;  // second moment (adam only)
};

/// One update of the flat parameter vector. Weight decay is decoupled and applies
/// to every entry: theta <- theta (1 - lr wd) - lr * update.
///   sgd_momentum:   buf = momentum buf + g,                      update = buf
///   adam_decoupled: m = b1 m + (1-b1) g, v = b2 v + (1-b2) g^2,   update = mhat / (sqrt(vhat) + eps)
inline void optimizer_step(Vector& params, const Vector& grads, OptimizerState& state, const OptimizerConfig& cfg) {
    if (params.size() != grads.size()) throw ShapeError("optimizer_step: parameter/gradient size mismatch");
    if (state.m.size() == 0) state.m = Vector::Zero(params.size());
    if (cfg.kind == OptimizerKind::adam_decoupled && state.v.size() == 0) state.v = Vector::Zero(params.size());
    if (state.m.size() != params.size()) throw ShapeError("optimizer_step: state size mismatch");
    ++state.step;
    const double decay = 1.0 - cfg.lr * cfg.weight_decay;
    if (cfg.kind == OptimizerKind::sgd_momentum) {
        state.m = cfg.momentum * state.m + grads;
        params = decay * params - cfg.lr * state.m;
        return;
    }
    state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grads;
    state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grads.cwiseProduct(grads);
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    const Vector update = (state.m / c1).array() / ((state.v / c2).array().sqrt() + cfg.eps);
    params = decay * params - cfg.lr * update;
}

struct TrainConfig {
    ModelConfig model;
    InitSpec init;
    OptimizerConfig optimizer;
    int steps = 100;
    int batch_size = 16;
    int log_every = 1;
    int kappa_probe_every = 0;  // 0 = never
    std::uint64_t seed = 0;     // head init and batch sampling

    void validate() const {
        model.validate();
        init.validate();
        if (!(optimizer.lr >= 0.0)) throw std::invalid_argument("lr must be >= 0");
        if (!(optimizer.weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be >= 0");
        if (steps < 1) throw std::invalid_argument("steps must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
        if (log_every < 1) throw std::invalid_argument("log_every must be >= 1");
        if (kappa_probe_every < 0) throw std::invalid_argument("kappa_probe_every must be >= 0");
        if (kappa_probe_every > 0 && model.layer_norm)
            throw std::invalid_argument("kappa probes need layer_norm = false");
    }
};

struct KappaProbe {
    int step = 0;
    std::vector<double> kappa_k;  // per layer
    std::uint64_t digest_before = 0;
    std::uint64_t digest_after = 0;
};

struct TrainLog {
    std::vector<double> losses;  // batch loss before each update
    std::vector<KappaProbe> probes;
    bool diverged = false;
    int divergence_step = -1;
    std::string divergence_reason;
    std::uint64_t digest = 0;
    double final_loss = std::numeric_limits<double>::quiet_NaN();  // mean loss over the dataset
    TrainableParams params;
};

inline TrainableParams init_trainable(const ModelConfig& c, const InitSpec& init, int classes, std::uint64_t seed) {
    TrainableParams p;
    p.net = init_network(c, init);
    p.head.w = gaussian_matrix(c.dim, classes, derive_seed(seed, {0x4ead}), 1.0 / std::sqrt(static_cast<double>(c.dim)));
    p.head.b = Vector::Zero(classes);
    return p;
}

/// Batches are drawn with replacement from Rng(derive_seed(seed, {step})).
inline std::vector<std::size_t> batch_indices(std::size_t dataset_size, int batch_size, std::uint64_t seed, int step) {
    Rng rng(derive_seed(seed, {0xba7c, static_cast<std::uint64_t>(step)}));
    std::uniform_int_distribution<std::size_t> pick(0, dataset_size - 1);
    std::vector<std::size_t> idx(batch_size);
    for (auto& i : idx) i = pick(rng);
    return idx;
}

inline TrainLog train(const Dataset& ds, const TrainConfig& cfg) {
    cfg.validate();
    if (ds.size() == 0) throw std::invalid_argument("train: empty dataset");
    if (ds.n != cfg.model.tokens || ds.d != cfg.model.dim)
        throw ShapeError("train: dataset is " + std::to_string(ds.n) + "x" + std::to_string(ds.d) + ", model expects " +
                         std::to_string(cfg.model.tokens) + "x" + std::to_string(cfg.model.dim));
    TrainLog log;
    TrainableParams p = init_trainable(cfg.model, cfg.init, ds.class_count, cfg.seed);
    OptimizerState state;
    Vector flat = flatten(p);
    auto diverge = [&](int step, const std::string& why) {
        log.diverged = true;
        log.divergence_step = step;
        log.divergence_reason = why;
    };
    for (int step = 0; step < cfg.steps; ++step) {
        if (cfg.kappa_probe_every > 0 && step % cfg.kappa_probe_every == 0) {
            KappaProbe probe;
            probe.step = step;
            probe.digest_before = digest(p);
            try {
                for (const auto& row : layer_conditions(cfg.model, p.net, {ds.samples[0]}, "probe", false))
                    probe.kappa_k.push_back(row.kappa_k);
            } catch (const Error&) {
                probe.kappa_k.assign(cfg.model.layers, std::numeric_limits<double>::quiet_NaN());
            }
            probe.digest_after = digest(p);
            log.probes.push_back(std::move(probe));
        }
        const auto idx = batch_indices(ds.size(), cfg.batch_size, cfg.seed, step);
        TrainableParams grad = zero_like(p);
        double loss = 0.0;
        try {
            for (std::size_t i : idx)
                loss += accumulate_gradient(ds.samples[i], ds.labels[i], p, cfg.model, 1.0 / cfg.batch_size, grad);
        } catch (const DivergenceError& e) {
            diverge(step, e.what());
            break;
        }
        loss /= cfg.batch_size;
        if (!std::isfinite(loss)) {
            diverge(step, "non-finite loss");
            break;
        }
        log.losses.push_back(loss);
        const Vector g = flatten(grad);
        if (!g.allFinite()) {
            diverge(step, "non-finite gradient");
            break;
        }
        optimizer_step(flat, g, state, cfg.optimizer);
        unflatten(flat, p);
    }
    log.digest = digest(p);
    if (!log.diverged) {
        try {
            log.final_loss = dataset_loss(ds, p, cfg.model);
        } catch (const DivergenceError& e) {
            diverge(cfg.steps, e.what());
        }
    }
    log.params = std::move(p);
    return log;
}

}  // namespace skipless
