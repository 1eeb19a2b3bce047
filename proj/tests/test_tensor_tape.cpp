#include <gtest/gtest.h>

#include <cmath>

#include "mscn/selfcheck.hpp"
#include "mscn/tape.hpp"
#include "mscn/tensor.hpp"

using namespace mscn;

TEST(Tensor, ShapeAndValues) {
    Tensor t({2, 3});
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_EQ(t.rank(), 2u);
    EXPECT_TRUE(t.all_finite());
    EXPECT_THROW(Tensor({2, 2}, {1.0}), ShapeError);
    EXPECT_EQ(Tensor::scalar(3.0).item(), 3.0);
    EXPECT_EQ(Tensor::scalar(3.0).rank(), 0u);
}

TEST(Matmul, IdentityAndRowSums) {
    GradientTape t;
    Variable a = t.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
    Variable eye = t.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
    Tensor out = t.value(t.matmul(a, eye));
    EXPECT_EQ(out.values(), (std::vector<double>{1, 2, 3, 4}));

    Variable ones = t.constant(Tensor::matrix(2, 1, {1, 1}));
    Tensor sums = t.value(t.matmul(a, ones));
    EXPECT_EQ(sums.values(), (std::vector<double>{3, 7}));
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
    GradientTape t;
    Variable a = t.constant(Tensor({2, 3}));
    Variable b = t.constant(Tensor({4, 5}));
    try {
        t.matmul(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos);
        EXPECT_NE(msg.find("[4x5]"), std::string::npos);
    }
}

TEST(Matmul, MatchesNaiveOracle) {
    Rng rng(99);
    for (int c = 0; c < 100; ++c) {
        Tensor a({5, 4}), b({4, 3});
        for (double& v : a.values()) v = rng.uniform(-1, 1);
        for (double& v : b.values()) v = rng.uniform(-1, 1);
        GradientTape t;
        Tensor got = t.value(t.matmul(t.constant(a), t.constant(b)));
        Tensor want = naive_matmul(a, b);
        for (std::size_t i = 0; i < got.numel(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
    }
}

TEST(Conv2d, ScalingKernel) {
    GradientTape t;
    Variable img = t.constant(Tensor({1, 2, 2}, {1, 2, 3, 4}));
    Variable k = t.constant(Tensor({1, 1, 1, 1}, {2}));
    Tensor out = t.value(t.conv2d(img, k, 1, 0));
    EXPECT_EQ(out.shape(), (std::vector<std::size_t>{1, 2, 2}));
    EXPECT_EQ(out.values(), (std::vector<double>{2, 4, 6, 8}));
}

TEST(Conv2d, FullOverlapSum) {
    GradientTape t;
    Variable img = t.constant(Tensor::full({1, 3, 3}, 1.0));
    Variable k = t.constant(Tensor::full({1, 1, 3, 3}, 1.0));
    Tensor out = t.value(t.conv2d(img, k, 1, 0));
    EXPECT_EQ(out.shape(), (std::vector<std::size_t>{1, 1, 1}));
    EXPECT_EQ(out[0], 9.0);
}

TEST(Conv2d, KernelLargerThanPaddedInputThrows) {
    GradientTape t;
    Variable img = t.constant(Tensor({1, 2, 2}));
    Variable k = t.constant(Tensor({1, 1, 3, 3}));
    EXPECT_THROW(t.conv2d(img, k, 1, 0), ShapeError);
    EXPECT_NO_THROW(t.conv2d(img, k, 1, 1));
}

TEST(Conv2d, MatchesNaiveOracle) {
    Rng rng(7);
    for (int c = 0; c < 100; ++c) {
        Tensor in({3, 8, 8}), k({4, 3, 3, 3});
        for (double& v : in.values()) v = rng.uniform(-1, 1);
        for (double& v : k.values()) v = rng.uniform(-1, 1);
        const std::size_t stride = 1 + rng.below(2), pad = rng.below(2);
        GradientTape t;
        Tensor got = t.value(t.conv2d(t.constant(in), t.constant(k), stride, pad));
        Tensor want = naive_conv2d(in, k, stride, pad);
        ASSERT_EQ(got.shape(), want.shape());
        for (std::size_t i = 0; i < got.numel(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
    }
}

TEST(Relu, BasicAndGradient) {
    GradientTape t;
    Variable x = t.leaf(Tensor::vector({1, -1, 0}), true);
    Variable y = t.relu(x);
    EXPECT_EQ(t.value(y).values(), (std::vector<double>{1, 0, 0}));

    Variable loss = t.sum(y);
    t.backward(loss);
    EXPECT_EQ(t.grad(x).values(), (std::vector<double>{1, 0, 0}));
}

TEST(Relu, AllPositiveIsIdentity) {
    GradientTape t;
    Tensor in = Tensor::vector({0.5, 1.5, 2.0});
    EXPECT_TRUE(t.value(t.relu(t.constant(in))).bitwise_equal(in));
}

TEST(Concat, BasicEmptyAndBackward) {
    GradientTape t;
    Variable a = t.leaf(Tensor::vector({1, 2}), true);
    Variable b = t.leaf(Tensor::vector({3}), true);
    Variable c = t.concat(a, b);
    EXPECT_EQ(t.value(c).values(), (std::vector<double>{1, 2, 3}));

    Variable empty = t.constant(Tensor({0}));
    Variable d = t.concat(a, empty);
    EXPECT_EQ(t.value(d).values(), (std::vector<double>{1, 2}));

    Variable loss = t.add(t.sum(c), t.sum(d));
    t.backward(loss);
    EXPECT_EQ(t.grad(a).values(), (std::vector<double>{2, 2}));  // used twice
    EXPECT_EQ(t.grad(b).values(), (std::vector<double>{1}));

    GradientTape t2;
    Variable r0 = t2.constant(Tensor::matrix(1, 1, {1}));
    EXPECT_THROW(t2.concat(r0, r0), ShapeError);
}

TEST(L2Normalize, ThreeFourFive) {
    GradientTape t;
    Tensor out = t.value(t.l2_normalize(t.constant(Tensor::vector({3, 4}))));
    EXPECT_NEAR(out[0], 0.6, 1e-15);
    EXPECT_NEAR(out[1], 0.8, 1e-15);

    Tensor unit = Tensor::vector({1, 0, 0});
    Tensor same = t.value(t.l2_normalize(t.constant(unit)));
    EXPECT_TRUE(same.bitwise_equal(unit));

    EXPECT_THROW(t.l2_normalize(t.constant(Tensor::vector({0, 0}))), DegenerateInputError);
}

TEST(L2Normalize, OutputNormIsOne) {
    Rng rng(4);
    for (int c = 0; c < 50; ++c) {
        Tensor x({6});
        for (double& v : x.values()) v = rng.uniform(-1, 1);
        if (l2_norm(x) < 0.1) continue;
        GradientTape t;
        EXPECT_NEAR(l2_norm(t.value(t.l2_normalize(t.constant(x)))), 1.0, 1e-12);
    }
}

TEST(LogSoftmax, UniformAndShiftInvariant) {
    GradientTape t;
    Tensor a = t.value(t.log_softmax(t.constant(Tensor::vector({0, 0}))));
    EXPECT_NEAR(a[0], -std::log(2.0), 1e-12);
    EXPECT_NEAR(a[1], -std::log(2.0), 1e-12);

    Tensor b = t.value(t.log_softmax(t.constant(Tensor::vector({1000, 1000}))));
    EXPECT_NEAR(b[0], -std::log(2.0), 1e-12);
    EXPECT_TRUE(b.all_finite());
}

TEST(LogSoftmax, MatchesDirectFormulaInExtendedPrecision) {
    Rng rng(12);
    for (int c = 0; c < 100; ++c) {
        const std::size_t d = 2 + rng.below(6);
        Tensor x({d});
        std::vector<long double> xl(d);
        for (std::size_t i = 0; i < d; ++i) {
            x[i] = rng.uniform(-3, 3);
            xl[i] = x[i];
        }
        GradientTape t;
        Tensor got = t.value(t.log_softmax(t.constant(x)));
        const auto want = log_softmax_oracle(xl);
        for (std::size_t i = 0; i < d; ++i) {
            EXPECT_NEAR(got[i], static_cast<double>(want[i]), 1e-12);
        }
    }
}

TEST(Backward, SumGivesOnes) {
    GradientTape t;
    Variable x = t.leaf(Tensor::vector({5, 7}), true);
    t.backward(t.sum(x));
    EXPECT_EQ(t.grad(x).values(), (std::vector<double>{1, 1}));
}

TEST(Backward, NonScalarLossIsUsageError) {
    GradientTape t;
    Variable x = t.leaf(Tensor::vector({5, 7}), true);
    Variable y = t.relu(x);
    EXPECT_THROW(t.backward(y), UsageError);
}

TEST(Backward, FrozenLeafGetsBitwiseZero) {
    GradientTape t;
    Variable frozen = t.leaf(Tensor::vector({2, 3}), true, /*frozen=*/true);
    Variable free = t.leaf(Tensor::vector({5, 7}), true);
    Variable loss = t.sum(t.mul(frozen, free));
    t.backward(loss);
    EXPECT_TRUE(t.grad(frozen).bitwise_equal(Tensor({2})));
    EXPECT_EQ(t.grad(free).values(), (std::vector<double>{2, 3}));
}

TEST(Backward, ConstantZeroLossYieldsZeroGrads) {
    GradientTape t;
    Variable w = t.leaf(Tensor::vector({1, 2}), true);
    (void)t.relu(w);  // recorded but unused by the loss
    Variable loss = t.constant(0.0);
    t.backward(loss);
    EXPECT_TRUE(t.grad(w).bitwise_equal(Tensor({2})));
}

TEST(Backward, SecondCallThrows) {
    GradientTape t;
    Variable x = t.leaf(Tensor::vector({1}), true);
    Variable loss = t.sum(x);
    t.backward(loss);
    EXPECT_THROW(t.backward(loss), UsageError);
}

TEST(Backward, UnusedLeafReportsZeros) {
    GradientTape t;
    Variable x = t.leaf(Tensor::vector({1, 2}), true);
    Variable y = t.leaf(Tensor::vector({3}), true);
    t.backward(t.sum(x));
    EXPECT_TRUE(t.grad(y).bitwise_equal(Tensor({1})));
}

TEST(GradCheck, EveryOpPasses) {
    for (const GradCheckProblem& p : op_gradcheck_problems()) {
        GradCheckReport r = run_gradcheck(p, 5, 123);
        EXPECT_TRUE(r.pass) << p.name << " max rel err " << r.max_rel_err;
    }
}

TEST(GradCheck, FaultInjectionIsCaught) {
    GradientTape::set_gradient_fault("relu");
    bool caught = false;
    for (const GradCheckProblem& p : op_gradcheck_problems()) {
        if (p.name != "relu") continue;
        GradCheckReport r = run_gradcheck(p, 3, 5);
        caught = !r.pass;
    }
    GradientTape::set_gradient_fault("");
    EXPECT_TRUE(caught);
}

TEST(Tape, MinReluInputTracksKinks) {
    GradientTape t;
    (void)t.relu(t.constant(Tensor::vector({0.5, -0.02, 0.8})));
    EXPECT_NEAR(t.min_abs_relu_input(), 0.02, 1e-15);
}

TEST(Tape, ForwardOpsStayFiniteOnFiniteInputs) {
    Rng rng(31);
    for (int c = 0; c < 20; ++c) {
        GradientTape t;
        Tensor x({4});
        for (double& v : x.values()) v = rng.uniform(-1, 1);
        Variable v = t.constant(x);
        Variable y = t.relu(v);
        y = t.add(y, t.exp(t.scale(v, 0.5)));
        y = t.log_softmax(y);
        EXPECT_TRUE(t.value(y).all_finite());
    }
}
