#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "skipless/harness.hpp"
#include "skipless/jacobian.hpp"

using namespace skipless;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("skipless_" + name)).string();
}

ModelConfig tiny(bool skip, bool layer_norm = false, int heads = 1) {
    ModelConfig c;
    c.layers = 2;
    c.tokens = 4;
    c.dim = 8;
    c.heads = heads;
    c.mlp_hidden = 16;
    c.use_skip = skip;
    c.layer_norm = layer_norm;
    c.attention_scale = ModelConfig::default_scale(8, heads);
    return c;
}

}  // namespace

TEST(SynthTask, SeparableDeterministicBalanced) {
    SynthTask clean = synth_task(4, 8, 5, 200, 0.0, 1);
    EXPECT_EQ(nearest_template_accuracy(clean), 1.0);
    for (std::size_t a = 0; a < clean.templates.size(); ++a)
        for (std::size_t b = 0; b < clean.templates.size(); ++b) {
            const double dot = (clean.templates[a].array() * clean.templates[b].array()).sum();
            EXPECT_NEAR(dot, a == b ? 32.0 : 0.0, 1e-10);
        }

    SynthTask again = synth_task(4, 8, 5, 200, 0.0, 1);
    EXPECT_EQ(again.data.labels, clean.data.labels);

    SynthTask big = synth_task(2, 8, 10, 10000, 0.5, 2);
    std::vector<int> counts(10, 0);
    for (int y : big.data.labels) ++counts[y];
    const double p = 0.1, mean = 10000 * p, sd = std::sqrt(10000 * p * (1 - p));
    for (int c : counts) EXPECT_LE(std::abs(c - mean), 3 * sd);

    EXPECT_THROW(synth_task(4, 8, 1, 10, 0.0, 1), std::invalid_argument);
}

TEST(TensorFile, RoundTripIsBitExact) {
    SynthTask t = synth_task(3, 5, 4, 17, 0.3, 3);
    const std::string path = temp_path("roundtrip.skls");
    write_tensor_file(path, t.data);
    Dataset back = load_tensor_file(path);
    EXPECT_EQ(back.n, 3);
    EXPECT_EQ(back.d, 5);
    EXPECT_EQ(back.class_count, 4);
    EXPECT_EQ(back.labels, t.data.labels);
    ASSERT_EQ(back.size(), t.data.size());
    for (std::size_t i = 0; i < back.size(); ++i) EXPECT_TRUE(back.samples[i] == t.data.samples[i]);
    std::filesystem::remove(path);
}

TEST(TensorFile, Errors) {
    SynthTask t = synth_task(3, 5, 4, 6, 0.3, 4);
    const std::string path = temp_path("bad.skls");
    write_tensor_file(path, t.data);
    std::vector<char> bytes;
    {
        std::ifstream in(path, std::ios::binary);
        bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    auto write = [&](const std::vector<char>& b) {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(b.data(), static_cast<std::streamsize>(b.size()));
    };
    auto field_of = [&]() -> std::string {
        try {
            load_tensor_file(path);
        } catch (const FormatError& e) {
            return e.field();
        }
        return "none";
    };

    std::vector<char> truncated(bytes.begin(), bytes.end() - 30);
    write(truncated);
    EXPECT_EQ(field_of(), "payload");
    try {
        load_tensor_file(path);
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
    }

    std::vector<char> bad_magic = bytes;
    bad_magic[0] = 'X';
    write(bad_magic);
    EXPECT_EQ(field_of(), "magic");

    // Header says n = 2 while the payload was written with n = 3.
    std::vector<char> bad_n = bytes;
    const std::uint32_t two = 2;
    std::memcpy(bad_n.data() + 12, &two, 4);
    write(bad_n);
    EXPECT_EQ(field_of(), "n");

    std::vector<char> bad_d = bytes;
    const std::uint32_t four = 4;
    std::memcpy(bad_d.data() + 16, &four, 4);
    write(bad_d);
    EXPECT_EQ(field_of(), "d");

    std::vector<char> nan_entry = bytes;
    const double nan = std::nan("");
    std::memcpy(nan_entry.data() + 24, &nan, 8);
    write(nan_entry);
    EXPECT_THROW(load_tensor_file(path), NonFiniteError);

    std::filesystem::remove(path);
    EXPECT_THROW(load_tensor_file(path), std::runtime_error);
}

TEST(Backward, MatchesFiniteDifferences) {
    struct Case {
        bool skip, ln;
        int heads;
    };
    for (Case k : {Case{true, false, 1}, Case{false, false, 1}, Case{true, true, 2}, Case{false, true, 2}}) {
        ModelConfig c = tiny(k.skip, k.ln, k.heads);
        SynthTask t = synth_task(4, 8, 3, 4, 0.5, 5);
        TrainableParams p = init_trainable(c, InitSpec::supervised(6), 3, 7);
        // Move away from the symmetric initial point.
        Vector flat = flatten(p);
        flat += 0.05 * gaussian_matrix(flat.size(), 1, 8);
        unflatten(flat, p);

        TrainableParams grad = zero_like(p);
        for (int i = 0; i < 4; ++i) accumulate_gradient(t.data.samples[i], t.data.labels[i], p, c, 0.25, grad);
        const Vector analytic = flatten(grad);

        const Matrix fd = finite_difference_jacobian(
            [&](const Vector& theta) {
                TrainableParams q = p;
                unflatten(theta, q);
                Vector out(1);
                out(0) = dataset_loss(t.data, q, c);
                return out;
            },
            flat);
        const double rel = (analytic - fd.row(0).transpose()).norm() / fd.norm();
        EXPECT_LT(rel, 1e-5) << "skip=" << k.skip << " ln=" << k.ln << " heads=" << k.heads;
    }
}

TEST(Optimizer, AdamZeroGradientAndWeightDecay) {
    Vector p = Vector::LinSpaced(5, -1.0, 1.0);
    OptimizerConfig adam;
    adam.lr = 0.1;
    OptimizerState s;
    Vector q = p;
    optimizer_step(q, Vector::Zero(5), s, adam);
    EXPECT_EQ(q, p);

    for (OptimizerKind kind : {OptimizerKind::sgd_momentum, OptimizerKind::adam_decoupled}) {
        OptimizerConfig cfg;
        cfg.kind = kind;
        cfg.lr = 0.1;
        cfg.weight_decay = 0.5;
        OptimizerState st;
        Vector r = p;
        optimizer_step(r, Vector::Zero(5), st, cfg);
        EXPECT_LT((r - 0.95 * p).norm(), 1e-15);
    }
}

TEST(Optimizer, AdamThreeStepTrace) {
    // f(x) = x^2 from x = 1 with lr 0.1 and default betas.
    Vector x(1);
    x << 1.0;
    OptimizerConfig cfg;
    cfg.lr = 0.1;
    OptimizerState s;
    const double expected[3] = {0.9000000005, 0.8004122286917928, 0.7015862729460303};
    for (double e : expected) {
        optimizer_step(x, 2.0 * x, s, cfg);
        EXPECT_NEAR(x(0), e, 1e-14);
    }
}

TEST(Optimizer, SgdMomentumTrace) {
    Vector x(1);
    x << 1.0;
    OptimizerConfig cfg;
    cfg.kind = OptimizerKind::sgd_momentum;
    cfg.lr = 0.1;
    cfg.momentum = 0.5;
    OptimizerState s;
    optimizer_step(x, 2.0 * x, s, cfg);  // buf = 2, x = 0.8
    EXPECT_NEAR(x(0), 0.8, 1e-15);
    optimizer_step(x, 2.0 * x, s, cfg);  // buf = 1 + 1.6 = 2.6, x = 0.54
    EXPECT_NEAR(x(0), 0.54, 1e-15);
}

TEST(Train, ZeroLearningRateKeepsLossConstantOnFixedBatch) {
    SynthTask t = synth_task(4, 8, 3, 1, 0.2, 9);
    TrainConfig cfg;
    cfg.model = tiny(true);
    cfg.init = InitSpec::default_init(1);
    cfg.optimizer.lr = 0.0;
    cfg.steps = 5;
    cfg.batch_size = 1;
    TrainLog log = train(t.data, cfg);
    ASSERT_EQ(log.losses.size(), 5u);
    for (double l : log.losses) EXPECT_EQ(l, log.losses[0]);
    EXPECT_EQ(log.final_loss, log.losses[0]);
}

TEST(Train, DeterministicAndProbesDoNotMutate) {
    SynthTask t = synth_task(4, 8, 3, 32, 0.3, 10);
    TrainConfig cfg;
    cfg.model = tiny(false);
    cfg.init = InitSpec::supervised(2);
    cfg.optimizer.lr = 1e-3;
    cfg.steps = 12;
    cfg.batch_size = 4;
    cfg.kappa_probe_every = 4;
    TrainLog a = train(t.data, cfg);
    TrainLog b = train(t.data, cfg);
    EXPECT_EQ(a.losses, b.losses);
    EXPECT_EQ(a.digest, b.digest);
    ASSERT_EQ(a.probes.size(), 3u);
    for (const KappaProbe& p : a.probes) {
        EXPECT_EQ(p.digest_before, p.digest_after);
        EXPECT_EQ(p.kappa_k.size(), 2u);
    }
    cfg.kappa_probe_every = 0;
    TrainLog c = train(t.data, cfg);
    EXPECT_EQ(c.digest, a.digest);
}

TEST(Train, SkipModelLossDecreases) {
    SynthTask t = synth_task(4, 8, 4, 64, 0.3, 11);
    TrainConfig cfg;
    cfg.model = tiny(true);
    cfg.init = InitSpec::default_init(3);
    cfg.optimizer.lr = 3e-3;
    cfg.steps = 150;
    cfg.batch_size = 8;
    TrainLog log = train(t.data, cfg);
    EXPECT_FALSE(log.diverged);
    const double initial = dataset_loss(t.data, init_trainable(cfg.model, cfg.init, 4, cfg.seed), cfg.model);
    EXPECT_LT(log.final_loss, 0.5 * initial);
}

TEST(Train, DivergenceIsFlagged) {
    SynthTask t = synth_task(4, 8, 3, 8, 0.3, 12);
    TrainConfig cfg;
    cfg.model = tiny(false);
    cfg.init = InitSpec::supervised(1);
    cfg.init.c = 1e100;
    cfg.steps = 3;
    cfg.batch_size = 2;
    TrainLog log = train(t.data, cfg);
    EXPECT_TRUE(log.diverged);
    EXPECT_EQ(log.divergence_step, 0);
    EXPECT_TRUE(log.losses.empty());
}

TEST(Train, RejectsShapeMismatch) {
    SynthTask t = synth_task(5, 8, 3, 4, 0.3, 13);
    TrainConfig cfg;
    cfg.model = tiny(true);
    EXPECT_THROW(train(t.data, cfg), ShapeError);
}
