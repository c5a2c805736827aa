#include <gtest/gtest.h>

#include <cmath>

#include "skipless/init.hpp"
#include "skipless/jacobian_check.hpp"
#include "skipless/model.hpp"

using namespace skipless;

namespace {

ModelConfig small_config(int layers, int n, int d, int heads, bool skip) {
    ModelConfig c;
    c.layers = layers;
    c.tokens = n;
    c.dim = d;
    c.heads = heads;
    c.use_skip = skip;
    c.mlp_hidden = 2 * d;
    c.attention_scale = 1.0;
    return c;
}

void expect_row_stochastic(const Matrix& a) {
    EXPECT_TRUE((a.array() >= 0.0).all());
    for (Index i = 0; i < a.rows(); ++i) EXPECT_NEAR(a.row(i).sum(), 1.0, 1e-12);
}

}  // namespace

TEST(RowSoftmax, Examples) {
    Matrix zero = Matrix::Zero(4, 4);
    EXPECT_LT((row_softmax(zero) - Matrix::Constant(4, 4, 0.25)).cwiseAbs().maxCoeff(), 1e-15);

    Matrix row(1, 2);
    row << 0.0, std::log(2.0);
    Matrix s = row_softmax(row);
    EXPECT_NEAR(s(0, 0), 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(s(0, 1), 2.0 / 3.0, 1e-15);

    // Margin 20: each row leaks (n-1) e^-20 off the diagonal, under 1e-8 up to n = 5.
    Matrix m = Matrix::Identity(5, 5) * 20.0;
    EXPECT_LT((row_softmax(m) - Matrix::Identity(5, 5)).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(RowSoftmax, StableForHugeLogits) {
    Matrix m(1, 3);
    m << 1000.0, 999.0, -1000.0;
    Matrix s = row_softmax(m);
    EXPECT_TRUE(s.allFinite());
    expect_row_stochastic(s);
}

TEST(RowSoftmax, TemperatureFlattensMonotonically) {
    Matrix m = gaussian_matrix(5, 5, 4);
    double previous = 2.0;
    for (double t : {0.25, 0.5, 1.0, 2.0, 4.0, 8.0}) {
        const double top = row_softmax(m, t).maxCoeff();
        EXPECT_LT(top, previous);
        previous = top;
    }
    EXPECT_THROW(row_softmax(m, 0.0), std::invalid_argument);
}

TEST(AttentionLogits, Examples) {
    const int n = 5, d = 5;
    ModelConfig c = small_config(1, n, d, 1, true);
    BlockParams p = BlockParams::zeros(c);
    p.wq = Matrix::Identity(d, d);
    p.wk = Matrix::Identity(d, d);
    Matrix x = gaussian_matrix(n, d, 1);
    EXPECT_LT((attention_logits(x, p, 0, c) - x * x.transpose()).norm(), 1e-12);

    // X = I returns the query/key product itself.
    p.wq = gaussian_matrix(d, d, 2);
    p.wk = gaussian_matrix(d, d, 3);
    Matrix prod = p.wq * p.wk.transpose();
    EXPECT_LT((attention_logits(Matrix::Identity(n, d), p, 0, c) - prod).norm(), 1e-12);

    // Brute-force triple product with a non-unit scale and two heads.
    ModelConfig c2 = small_config(1, 4, 6, 2, true);
    c2.attention_scale = 1.7;
    BlockParams q = random_network(c2, 9).blocks[0];
    Matrix x2 = gaussian_matrix(4, 6, 10);
    for (int h = 0; h < 2; ++h) {
        Matrix brute = Matrix::Zero(4, 4);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j)
                for (int a = 0; a < 6; ++a)
                    for (int b = 0; b < 6; ++b)
                        for (int k = 0; k < 3; ++k)
                            brute(i, j) += x2(i, a) * q.wq(a, 3 * h + k) * q.wk(b, 3 * h + k) * x2(j, b);
        EXPECT_LT((attention_logits(x2, q, h, c2) - brute / 1.7).norm(), 1e-12);
    }
    EXPECT_THROW(attention_logits(x2, q, 2, c2), ShapeError);
}

TEST(SelfAttention, IdentityAttentionAndSingleToken) {
    const int n = 4, d = 4;
    ModelConfig c = small_config(1, n, d, 1, true);
    BlockParams p = random_network(c, 5).blocks[0];
    Matrix x = Matrix::Identity(n, d);
    p.wq = 100.0 * Matrix::Identity(d, d);
    p.wk = Matrix::Identity(d, d);
    EXPECT_LT((self_attention(x, p, c) - x * p.wv * p.wo).cwiseAbs().maxCoeff(), 1e-6);

    ModelConfig c1 = small_config(1, 1, d, 1, true);
    Matrix one = gaussian_matrix(1, d, 6);
    std::vector<Matrix> attn;
    Matrix out = self_attention(one, p, c1, nullptr, &attn);
    EXPECT_EQ(attn[0](0, 0), 1.0);
    EXPECT_LT((out - one * p.wv * p.wo).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(SelfAttention, SumFormMatchesConcatenationForm) {
    ModelConfig c = small_config(1, 5, 8, 2, true);
    c.attention_scale = 2.0;
    BlockParams p = random_network(c, 12).blocks[0];
    Matrix x = gaussian_matrix(5, 8, 13);
    // Concat(A_1 V_1, A_2 V_2) W_O, coded independently.
    Matrix concat(5, 8);
    for (int h = 0; h < 2; ++h) {
        Matrix q = x * p.wq.middleCols(4 * h, 4);
        Matrix k = x * p.wk.middleCols(4 * h, 4);
        Matrix logits = q * k.transpose() / 2.0;
        Matrix a(5, 5);
        for (int i = 0; i < 5; ++i) {
            double denom = 0;
            for (int j = 0; j < 5; ++j) denom += std::exp(logits(i, j));
            for (int j = 0; j < 5; ++j) a(i, j) = std::exp(logits(i, j)) / denom;
        }
        concat.middleCols(4 * h, 4) = a * (x * p.wv.middleCols(4 * h, 4));
    }
    EXPECT_LT((self_attention(x, p, c) - concat * p.wo).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(SelfAttention, HeadPermutationInvariance) {
    ModelConfig c = small_config(1, 6, 9, 3, true);
    BlockParams p = random_network(c, 21).blocks[0];
    Matrix x = gaussian_matrix(6, 9, 22);
    const int order[3] = {2, 0, 1};
    BlockParams perm = p;
    for (int h = 0; h < 3; ++h) {
        perm.wq.middleCols(3 * h, 3) = p.wq.middleCols(3 * order[h], 3);
        perm.wk.middleCols(3 * h, 3) = p.wk.middleCols(3 * order[h], 3);
        perm.wv.middleCols(3 * h, 3) = p.wv.middleCols(3 * order[h], 3);
        perm.wo.middleRows(3 * h, 3) = p.wo.middleRows(3 * order[h], 3);
    }
    EXPECT_LT((self_attention(x, p, c) - self_attention(x, perm, c)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(BlockForward, ZeroWeights) {
    ModelConfig c = small_config(1, 4, 6, 2, true);
    BlockParams p = BlockParams::zeros(c);
    Matrix x = gaussian_matrix(4, 6, 30);
    EXPECT_EQ(block_forward(x, p, c).output, x);

    c.use_skip = false;
    p.mlp_b2 = Vector::LinSpaced(6, 1.0, 6.0);
    Matrix expected = Matrix::Zero(4, 6);
    expected.rowwise() += p.mlp_b2.transpose();
    EXPECT_EQ(block_forward(x, p, c).output, expected);
}

TEST(BlockForward, ComposesAttentionAndIndependentMlp) {
    for (bool skip : {true, false}) {
        ModelConfig c = small_config(1, 5, 6, 2, skip);
        c.activation = Activation::gelu;
        BlockParams p = random_network(c, 40).blocks[0];
        Matrix x = gaussian_matrix(5, 6, 41);
        Matrix xl = self_attention(x, p, c) + (skip ? x : Matrix::Zero(5, 6));
        // Independent MLP: gelu(t) = t * Phi(t).
        Matrix h = xl * p.mlp_w1;
        for (Index i = 0; i < h.rows(); ++i)
            for (Index j = 0; j < h.cols(); ++j) {
                const double t = h(i, j) + p.mlp_b1(j);
                h(i, j) = t * 0.5 * std::erfc(-t / std::sqrt(2.0));
            }
        Matrix y = h * p.mlp_w2;
        y.rowwise() += p.mlp_b2.transpose();
        if (skip) y += xl;
        EXPECT_LT((block_forward(x, p, c).output - y).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(BlockForward, MlpBypass) {
    ModelConfig c = small_config(1, 3, 4, 1, false);
    c.use_mlp = false;
    BlockParams p = random_network(c, 50).blocks[0];
    Matrix x = gaussian_matrix(3, 4, 51);
    EXPECT_EQ(block_forward(x, p, c).output, self_attention(x, p, c));
}

TEST(NetworkForward, Composition) {
    Matrix x = gaussian_matrix(4, 6, 60);
    ModelConfig empty = small_config(0, 4, 6, 2, false);
    EXPECT_EQ(network_forward(x, NetworkParams{}, empty).output(), x);

    ModelConfig c = small_config(2, 4, 6, 2, false);
    NetworkParams net = random_network(c, 61);
    ForwardTrace t = network_forward(x, net, c);
    Matrix manual = block_forward(block_forward(x, net.blocks[0], c).output, net.blocks[1], c).output;
    EXPECT_EQ(t.output(), manual);
    ASSERT_EQ(t.layers.size(), 2u);
    for (const auto& layer : t.layers)
        for (const auto& a : layer.attention) expect_row_stochastic(a);
}

TEST(NetworkForward, ZeroWeightsWithSkipIsIdentity) {
    for (int layers : {1, 3, 7}) {
        ModelConfig c = small_config(layers, 5, 4, 2, true);
        NetworkParams net;
        for (int l = 0; l < layers; ++l) net.blocks.push_back(BlockParams::zeros(c));
        Matrix x = gaussian_matrix(5, 4, 70 + layers);
        EXPECT_EQ(network_forward(x, net, c).output(), x);
    }
}

TEST(NetworkForward, DeepSkiplessDefaultInitNeverSilentNan) {
    ModelConfig c = small_config(12, 16, 32, 1, false);
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        NetworkParams net = init_network(c, InitSpec::default_init(seed));
        Matrix x = gaussian_matrix(16, 32, 80 + seed);
        try {
            ForwardTrace t = network_forward(x, net, c);
            EXPECT_TRUE(t.output().allFinite());
        } catch (const DivergenceError& e) {
            EXPECT_GE(e.layer(), 1);
            EXPECT_LE(e.layer(), 12);
        }
    }
}

TEST(NetworkForward, DivergenceNamesLayer) {
    ModelConfig c = small_config(3, 4, 4, 1, false);
    c.use_mlp = false;
    NetworkParams net = random_network(c, 90);
    net.blocks[1].wv *= std::numeric_limits<double>::infinity();
    Matrix x = gaussian_matrix(4, 4, 91);
    try {
        network_forward(x, net, c);
        FAIL() << "expected divergence";
    } catch (const DivergenceError& e) {
        EXPECT_EQ(e.layer(), 2);
    }
}

TEST(NetworkForward, ShapeChecks) {
    ModelConfig c = small_config(1, 4, 6, 4, false);
    EXPECT_THROW(c.validate(), ShapeError);
    c.heads = 2;
    NetworkParams net = random_network(c, 1);
    EXPECT_THROW(network_forward(gaussian_matrix(3, 6, 1), net, c), ShapeError);
    net.blocks[0].wq = Matrix::Zero(5, 5);
    EXPECT_THROW(network_forward(gaussian_matrix(4, 6, 1), net, c), ShapeError);
}
