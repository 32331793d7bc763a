#include <cmath>
#include <functional>
#include <numeric>

#include <gtest/gtest.h>

#include "dyco/checkpoint.hpp"
#include "dyco/grad_suite.hpp"
#include "support.hpp"

using namespace dyco;

namespace {

Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    return grad_detail::uniform(std::move(s), lo, hi, rng);
}

}  // namespace

TEST(Evaluate, IdentityReturnsInput) {
    Graph g;
    const Node x = g.input("x", Shape{2, 2});
    g.set_output("y", x);
    const auto ev = evaluate(g, {{"x", Tensor::matrix(2, 2, {1, 2, 3, 4})}});
    EXPECT_EQ(ev.value(g.output("y")).values(), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Evaluate, Relu) {
    Graph g;
    const Node y = g.relu(g.input("x", Shape{3}));
    const auto ev = evaluate(g, {{"x", Tensor::vector({-1, 0, 2})}});
    EXPECT_EQ(ev.value(y).values(), (std::vector<double>{0, 0, 2}));
}

TEST(Evaluate, ThreeLayerMlpMatchesLoops) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const std::size_t n = 5, dims[4] = {4, 7, 6, 3};
        Graph g;
        Bindings b;
        b["x"] = random_tensor(Shape{n, dims[0]}, rng);
        Node h = g.input("x", Shape{n, dims[0]});
        for (int l = 0; l < 3; ++l) {
            const std::string w = "w" + std::to_string(l), bias = "b" + std::to_string(l);
            b[w] = random_tensor(Shape{dims[l], dims[l + 1]}, rng);
            b[bias] = random_tensor(Shape{dims[l + 1]}, rng);
            h = g.add(g.matmul(h, g.input(w, b[w].shape())), g.input(bias, b[bias].shape()));
            if (l < 2) h = g.relu(h);
        }
        const Tensor got = evaluate(g, b).value(h);

        std::vector<double> cur = b["x"].values();
        std::size_t width = dims[0];
        for (int l = 0; l < 3; ++l) {
            const auto& w = b["w" + std::to_string(l)];
            const auto& bias = b["b" + std::to_string(l)];
            const std::size_t out = dims[l + 1];
            std::vector<double> next(n * out);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t o = 0; o < out; ++o) {
                    double s = bias[o];
                    for (std::size_t k = 0; k < width; ++k) s += cur[i * width + k] * w[k * out + o];
                    next[i * out + o] = l < 2 ? std::max(0.0, s) : s;
                }
            cur = std::move(next);
            width = out;
        }
        ASSERT_EQ(got.size(), cur.size());
        for (std::size_t i = 0; i < cur.size(); ++i) EXPECT_NEAR(got[i], cur[i], 1e-12) << "seed " << seed;
    }
}

TEST(Evaluate, UnboundLeafIsNamed) {
    Graph g;
    g.relu(g.input("weights", Shape{2}));
    try {
        evaluate(g, {});
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("weights"), std::string::npos);
    }
}

TEST(Evaluate, ShapeMismatchNamesNode) {
    Graph g;
    const Node a = g.input("a", Shape{2, 3});
    const Node b = g.input("b", Shape{4, 2});
    try {
        g.matmul(a, b);
        FAIL() << "expected a shape error";
    } catch (const ShapeError& e) {
        EXPECT_EQ(e.node(), 2u);
        EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
    }
}

TEST(Evaluate, BoundShapeMustMatchDeclaration) {
    Graph g;
    g.relu(g.input("x", Shape{3}));
    EXPECT_THROW(evaluate(g, {{"x", Tensor::vector({1, 2})}}), Error);
}

TEST(Evaluate, IsPure) {
    Rng rng(3);
    Graph g;
    const Node x = g.input("x", Shape{4, 5});
    const Node y = g.sum(g.log_softmax(g.matmul(x, g.transpose(x))));
    const Bindings b{{"x", random_tensor(Shape{4, 5}, rng)}};
    const double a = evaluate(g, b).value(y).item();
    const double c = evaluate(g, b).value(y).item();
    EXPECT_EQ(std::memcmp(&a, &c, sizeof a), 0);
}

TEST(Evaluate, SoftmaxRowsSumToOne) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(seed);
        Graph g;
        const Node s = g.softmax(g.input("x", Shape{6, 9}));
        const auto v = evaluate(g, {{"x", random_tensor(Shape{6, 9}, rng, -30, 30)}}).value(s);
        for (std::size_t r = 0; r < 6; ++r) {
            double sum = 0.0;
            for (std::size_t c = 0; c < 9; ++c) sum += v.at(r, c);
            EXPECT_NEAR(sum, 1.0, 1e-12);
        }
    }
}

TEST(Evaluate, StagedEvaluationComputesOnlyNewNodes) {
    Graph g;
    const Node x = g.input("x", Shape{2});
    const Node y = g.sum(x);
    Evaluation ev;
    evaluate(g, {{"x", Tensor::vector({1, 2})}}, ev);
    EXPECT_EQ(ev.computed(), 2u);
    const Node z = g.scale(y, 3.0);
    evaluate(g, {{"x", Tensor::vector({1, 2})}}, ev);
    EXPECT_DOUBLE_EQ(ev.value(z).item(), 9.0);
}

TEST(Backward, SumGivesOnes) {
    Graph g;
    const Node x = g.input("x", Shape{2, 3});
    const Node y = g.sum(x);
    const auto b = Bindings{{"x", Tensor::matrix(2, 3, {1, -2, 3, 0.5, 7, 8})}};
    const auto grads = backward(g, evaluate(g, b), y);
    EXPECT_EQ(grads.at("x").values(), std::vector<double>(6, 1.0));
}

TEST(Backward, SquareGivesTwoX) {
    Graph g;
    const Node x = g.input("x", Shape{3});
    const Node y = g.sum(g.mul(x, x));
    const auto grads = backward(g, evaluate(g, {{"x", Tensor::vector({1, 2, 3})}}), y);
    EXPECT_EQ(grads.at("x").values(), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, UnreachableLeafGetsZeros) {
    Graph g;
    const Node x = g.input("x", Shape{2});
    g.input("unused", Shape{3});
    const Node y = g.sum(x);
    const auto grads = backward(g, evaluate(g, {{"x", Tensor::vector({1, 2})}, {"unused", Tensor(Shape{3})}}), y);
    EXPECT_EQ(grads.at("unused").values(), std::vector<double>(3, 0.0));
}

TEST(Backward, NonScalarOutputRejected) {
    Graph g;
    const Node x = g.input("x", Shape{2});
    const auto ev = evaluate(g, {{"x", Tensor::vector({1, 2})}});
    EXPECT_THROW(backward(g, ev, x), Error);
}

TEST(GradientCheck, LinearIsExact) {
    Rng rng(1);
    const double err = gradient_check([](Graph& g, Node x) { return g.sum(x); }, random_tensor(Shape{3, 4}, rng), 1e-5);
    EXPECT_LE(err, 1e-8);
}

TEST(GradientCheck, SigmoidAtZero) {
    Graph g;
    const Node x = g.input("x", Shape{1});
    const Node y = g.sum(g.sigmoid(x));
    const Bindings b{{"x", Tensor::vector({0.0})}};
    EXPECT_DOUBLE_EQ(backward(g, evaluate(g, b), y).at("x")[0], 0.25);
    EXPECT_LE(gradient_check(g, b, y).max_rel_error, 1e-6);
}

TEST(GradientCheck, EpsilonRange) {
    const Tensor p = Tensor::vector({1.0});
    auto f = [](Graph& g, Node x) { return g.sum(x); };
    EXPECT_THROW(gradient_check(f, p, 1e-8), Error);
    EXPECT_THROW(gradient_check(f, p, 1e-2), Error);
}

TEST(GradientCheck, NonFiniteReportsCoordinate) {
    Graph g;
    const Node x = g.input("x", Shape{2});
    const Node y = g.sum(g.log(x));
    try {
        gradient_check(g, {{"x", Tensor::vector({1.0, 5e-6})}}, y);
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("x[1]"), std::string::npos) << e.what();
    }
}

// Every differentiable op against central differences at 100 random points.
namespace {

struct OpCase {
    const char* name;
    std::function<Node(Graph&, Bindings&, Rng&)> build;
};

std::vector<OpCase> op_cases() {
    auto leaf = [](Graph& g, Bindings& b, Rng& rng, const std::string& name, Shape s, double lo = -1.0,
                   double hi = 1.0) {
        b[name] = random_tensor(s, rng, lo, hi);
        return g.input(name, std::move(s));
    };
    using grad_detail::readout;
    return {
        {"matmul", [=](Graph& g, Bindings& b, Rng& r) { return readout(g, g.matmul(leaf(g, b, r, "a", {3, 4}), leaf(g, b, r, "b", {4, 2})), r); }},
        {"transpose", [=](Graph& g, Bindings& b, Rng& r) { return readout(g, g.transpose(leaf(g, b, r, "a", {3, 4})), r); }},
        {"add_row", [=](Graph& g, Bindings& b, Rng& r) { return readout(g, g.add(leaf(g, b, r, "a", {3, 4}), leaf(g, b, r, "b", {4})), r); }},
        {"sub_scalar", [=](Graph& g, Bindings& b, Rng& r) { return readout(g, g.sub(leaf(g, b, r, "a", {3, 4}), leaf(g, b, r, "b", {})), r); }},
        {"mul", [=](Graph& g, Bindings& b, Rng& r) { return readout(g, g.mul(leaf(g, b, r, "a", {3, 4}), leaf(g, b, r, "b", {3, 4})), r); }},
        {"div", [=](Graph& g, Bindings& b, Rng& r) { return readout(g, g.div(leaf(g, b, r, "a", {3, 4}), leaf(g, b, r, "b", {4}, 0.5, 2.0)), r); }},
        {"scale", [=](Graph& g, Bindings& b, Rng& r) { return readout(g, g.scale(leaf(g, b, r, "a", {5}), -2.5), r); }},
        {"relu", [=](Graph& g, Bindings& b, Rng& r) { return readout(g, g.relu(leaf(g, b, r, "a", {3, 4})), r); }},
        {"sigmoid", [=](Graph& g, Bindings& b, Rng& r) { return readout(g, g.sigmoid(leaf(g, b, r, "a", {3, 4}, -4, 4)), r); }},
        {"log", [=](Graph& g, Bindings& b, Rng& r) { return readout(g, g.log(leaf(g, b, r, "a", {6}, 0.2, 3.0)), r); }},
        {"abs", [=](Graph& g, Bindings& b, Rng& r) { return readout(g, g.abs(leaf(g, b, r, "a", {6})), r); }},
        {"softmax", [=](Graph& g, Bindings& b, Rng& r) { return readout(g, g.softmax(leaf(g, b, r, "a", {3, 5}, -3, 3)), r); }},
        {"log_softmax", [=](Graph& g, Bindings& b, Rng& r) { return readout(g, g.log_softmax(leaf(g, b, r, "a", {3, 5}, -3, 3)), r); }},
        {"mean", [=](Graph& g, Bindings& b, Rng& r) { return g.mean(g.mul(leaf(g, b, r, "a", {3, 4}), leaf(g, b, r, "b", {3, 4}))); }},
        {"mean_rows", [=](Graph& g, Bindings& b, Rng& r) { return readout(g, g.mean_rows(leaf(g, b, r, "a", {5, 3})), r); }},
        {"concat", [=](Graph& g, Bindings& b, Rng& r) { return readout(g, g.concat({leaf(g, b, r, "a", {3, 2}), leaf(g, b, r, "b", {3, 4})}), r); }},
        {"slice_cols", [=](Graph& g, Bindings& b, Rng& r) { return readout(g, g.slice_cols(leaf(g, b, r, "a", {3, 6}), 1, 4), r); }},
        {"slice_flat", [=](Graph& g, Bindings& b, Rng& r) { return readout(g, g.slice_flat(leaf(g, b, r, "a", {10}), 2, 7), r); }},
        {"reshape", [=](Graph& g, Bindings& b, Rng& r) { return readout(g, g.reshape(leaf(g, b, r, "a", {12}), {3, 4}), r); }},
        {"gather_rows", [=](Graph& g, Bindings& b, Rng& r) { return readout(g, g.gather_rows(leaf(g, b, r, "a", {4, 3}), {3, 0, 0, 2}), r); }},
        {"segment_mean", [=](Graph& g, Bindings& b, Rng& r) { return readout(g, g.segment_mean(leaf(g, b, r, "a", {6, 2}), {0, 2, 0, -1, 2, 2}, 3), r); }},
        {"conv3d", [=](Graph& g, Bindings& b, Rng& r) {
             return readout(g, g.conv3d(leaf(g, b, r, "x", {27, 2}), leaf(g, b, r, "w", {27, 2, 3}), leaf(g, b, r, "b", {3}), 3,
                                        {1, 0, 1, 1, 1, 0, 0, 1, 1, 1, 0, 1, 1, 1, 1, 0, 0, 1, 1, 1, 0, 1, 1, 1, 0, 1, 1}),
                            r);
         }},
        {"layer_norm", [=](Graph& g, Bindings& b, Rng& r) { return readout(g, g.layer_norm(leaf(g, b, r, "x", {3, 5}), leaf(g, b, r, "gain", {5}), leaf(g, b, r, "bias", {5})), r); }},
        {"row_norm", [=](Graph& g, Bindings& b, Rng& r) { return readout(g, g.row_norm(leaf(g, b, r, "a", {4, 3})), r); }},
        {"bce_logits", [=](Graph& g, Bindings& b, Rng& r) {
             Tensor t(Shape{6});
             for (std::size_t i = 0; i < 6; ++i) t[i] = i % 2 ? 1.0 : 0.0;
             return readout(g, g.bce_logits(leaf(g, b, r, "a", {6}, -4, 4), g.constant(t)), r);
         }},
    };
}

}  // namespace

TEST(GradientCheck, EveryOpAtHundredPoints) {
    for (const auto& c : op_cases()) {
        double worst = 0.0;
        for (std::uint64_t seed = 0; seed < 100; ++seed) {
            Rng rng(seed);
            Graph g;
            Bindings b;
            const Node y = c.build(g, b, rng);
            worst = std::max(worst, gradient_check(g, b, y).max_rel_error);
        }
        EXPECT_LE(worst, 1e-4) << c.name;
    }
}

TEST(GradientCheck, RandomCompositeGraph) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(seed);
        Graph g;
        Bindings b{{"a", random_tensor(Shape{4, 3}, rng)}, {"w", random_tensor(Shape{3, 3}, rng)}};
        const Node a = g.input("a", Shape{4, 3});
        const Node w = g.input("w", Shape{3, 3});
        const Node h = g.sigmoid(g.layer_norm(g.matmul(a, w), g.constant(Tensor(Shape{3}, 1.0)), g.constant(Tensor(Shape{3}))));
        const Node y = g.add(g.mean(g.log_softmax(g.concat({h, a}))), g.sum(g.row_norm(g.sub(h, a))));
        EXPECT_LE(gradient_check(g, b, y).max_rel_error, 1e-4) << "seed " << seed;
    }
}

namespace {

Params attention_params(std::size_t d, std::size_t heads, std::uint64_t seed) {
    Params p;
    Rng rng(seed);
    init_attention(p, "att", AttentionConfig{d, heads, 2 * d, 3}, rng);
    for (auto& [name, t] : p)
        for (double& v : t.values()) v += std::uniform_real_distribution<double>(-0.2, 0.2)(rng);
    return p;
}

}  // namespace

TEST(Mhsa, SingleTokenAttendsToItself) {
    const std::size_t d = 8;
    const Params params = attention_params(d, 2, 5);
    Rng rng(5);
    const Tensor tok = random_tensor(Shape{1, d}, rng);
    const AttentionConfig cfg{d, 2, 2 * d, 3};

    Graph g;
    ParamNodes p(g, params);
    std::vector<Node> weights;
    const Node x = g.constant(tok);
    const Node y = attention_block(p, "att", x, g.constant(Tensor(Shape{1, 1, 3})), cfg, &weights);
    // Without attention: h1 = x + o(v(ln1 x)), y = h1 + ff(ln2 h1).
    const Node h1 = g.add(x, linear(p, "att.o", linear(p, "att.v", layer_norm(p, "att.ln1", x))));
    const Node want =
        g.add(h1, linear(p, "att.ff2", g.relu(linear(p, "att.ff1", layer_norm(p, "att.ln2", h1)))));
    const auto ev = evaluate(g, Bindings(params.begin(), params.end()));
    for (Node w : weights) EXPECT_EQ(ev.value(w).item(), 1.0);
    for (std::size_t i = 0; i < d; ++i) EXPECT_NEAR(ev.value(y)[i], ev.value(want)[i], 1e-14);
}

TEST(Mhsa, PermutationEquivariant) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const std::size_t t = 5, d = 8;
        const AttentionConfig cfg{d, 2, 16, 3};
        const Params params = attention_params(d, 2, seed);
        Rng rng(seed + 100);
        const Tensor tokens = random_tensor(Shape{t, d}, rng);
        const Tensor rel = random_tensor(Shape{t, t, 3}, rng);
        std::vector<std::size_t> perm(t);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        Tensor ptok(Shape{t, d}), prel(Shape{t, t, 3});
        for (std::size_t i = 0; i < t; ++i) {
            for (std::size_t k = 0; k < d; ++k) ptok.at(i, k) = tokens.at(perm[i], k);
            for (std::size_t j = 0; j < t; ++j)
                for (std::size_t k = 0; k < 3; ++k) prel[(i * t + j) * 3 + k] = rel[(perm[i] * t + perm[j]) * 3 + k];
        }
        const Tensor out = mhsa_forward(tokens, params, "att", rel, cfg);
        const Tensor pout = mhsa_forward(ptok, params, "att", prel, cfg);
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t k = 0; k < d; ++k) EXPECT_NEAR(pout.at(i, k), out.at(perm[i], k), 1e-12);
    }
}

TEST(Mhsa, AttentionWeightsAreRowStochastic) {
    const std::size_t t = 6, d = 8;
    const Params params = attention_params(d, 4, 9);
    Rng rng(9);
    Graph g;
    ParamNodes p(g, params);
    std::vector<Node> weights;
    attention_block(p, "att", g.constant(random_tensor(Shape{t, d}, rng)), g.constant(random_tensor(Shape{t, t, 3}, rng)),
                    AttentionConfig{d, 4, 16, 3}, &weights);
    const auto ev = evaluate(g, Bindings(params.begin(), params.end()));
    ASSERT_EQ(weights.size(), 4u);
    for (Node w : weights)
        for (std::size_t i = 0; i < t; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < t; ++j) s += ev.value(w).at(i, j);
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
}

TEST(Mhsa, WidthMustDivideHeads) {
    Params p;
    Rng rng(1);
    EXPECT_THROW(init_attention(p, "att", AttentionConfig{8, 3, 8, 3}, rng), Error);
    const Params ok = attention_params(8, 2, 1);
    EXPECT_THROW(mhsa_forward(Tensor(Shape{2, 8}), ok, "att", Tensor(Shape{2, 2, 3}), AttentionConfig{8, 3, 16, 3}),
                 Error);
}

TEST(Mhsa, GradientCheck) {
    const auto r = run_gradient_suite(20, 11, "mhsa");
    ASSERT_EQ(r.size(), 1u);
    EXPECT_EQ(r[0].instances, 20u);
    EXPECT_LE(r[0].worst.max_rel_error, 1e-4);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    dyco::testing::TempDir dir;
    Rng rng(4);
    Params p{{"a", random_tensor(Shape{3, 2}, rng)}, {"b.scalar", Tensor::scalar(-0.0)}, {"c", random_tensor(Shape{2, 1, 3}, rng)}};
    p["a"][0] = 1.0 / 3.0;
    save_checkpoint(dir.file("m.ckpt"), p);
    const Params back = load_checkpoint(dir.file("m.ckpt"));
    ASSERT_EQ(back.size(), p.size());
    for (const auto& [name, t] : p) {
        EXPECT_EQ(back.at(name).shape(), t.shape());
        EXPECT_EQ(std::memcmp(back.at(name).data(), t.data(), t.size() * sizeof(double)), 0) << name;
    }
    EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(p));
}

TEST(Checkpoint, RejectsCorruptInput) {
    auto bytes = encode_checkpoint({{"a", Tensor::vector({1, 2})}});
    auto bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(decode_checkpoint(bad), Error);
    bytes.resize(bytes.size() - 3);
    EXPECT_THROW(decode_checkpoint(bytes), Error);
}

TEST(GradientCheck, CountsKinkCrossings) {
    Graph g;
    const Node x = g.input("x", Shape{3});
    const Node y = g.sum(g.relu(x));
    const auto rep = gradient_check(g, {{"x", Tensor::vector({-1.0, 4e-6, 2.0})}}, y);
    EXPECT_EQ(rep.kink_crossings, 1u);
    EXPECT_EQ(rep.leaf, "x");
    EXPECT_EQ(rep.index, 1u);
    EXPECT_EQ(gradient_check(g, {{"x", Tensor::vector({-1.0, 0.5, 2.0})}}, y).kink_crossings, 0u);
}
