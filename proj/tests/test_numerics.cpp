#include <gtest/gtest.h>

#include <cmath>

#include "rairl/numerics.hpp"

using namespace rairl;

namespace {

ParameterSet scalar_params(std::initializer_list<double> values) {
    ParameterSet p;
    p.add("w", DenseMatrix(values.size(), 1, Vector(values)));
    return p;
}

ParameterSet random_params(Rng& rng) {
    ParameterSet p;
    p.add("a", DenseMatrix(1 + rng.index(4), 1 + rng.index(3)));
    p.add("b", DenseMatrix(1 + rng.index(5), 1));
    p.add("c", DenseMatrix(2, 1 + rng.index(4)));
    for (std::size_t b = 0; b < p.block_count(); ++b) {
        fill_uniform(p[b], rng, -2.0, 2.0);
    }
    return p;
}

}  // namespace

TEST(Softmax, UniformOnEqualLogits) {
    const auto p = softmax(Vector{0.0, 0.0, 0.0});
    for (double x : p) {
        EXPECT_DOUBLE_EQ(x, 1.0 / 3.0);
    }
}

TEST(Softmax, MatchesHighPrecisionReference) {
    // mpmath at 30 digits
    const auto p = softmax(Vector{1.0, 2.0, 3.0});
    EXPECT_NEAR(p[0], 0.0900305731703804580, 1e-15);
    EXPECT_NEAR(p[1], 0.2447284710547976525, 1e-15);
    EXPECT_NEAR(p[2], 0.6652409557748218895, 1e-15);
}

TEST(Softmax, ShiftInvariant) {
    const auto a = softmax(Vector{0.0, 1.5, -2.0, 4.0});
    const auto b = softmax(Vector{100.0, 101.5, 98.0, 104.0});
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_NEAR(a[i], b[i], 1e-15);
    }
}

TEST(Softmax, EmptyInputRejected) {
    EXPECT_THROW(softmax(Vector{}), InvalidInput);
    EXPECT_THROW(log_softmax(Vector{}), InvalidInput);
}

TEST(Softmax, SumsToOneOnRandomVectors) {
    Rng rng(11);
    for (int trial = 0; trial < 500; ++trial) {
        Vector z(1 + rng.index(40));
        const double scale = std::pow(10.0, rng.uniform(-2.0, 2.5));
        for (double& x : z) {
            x = scale * rng.normal();
        }
        const auto p = softmax(z);
        double s = 0.0;
        for (double x : p) {
            EXPECT_GE(x, 0.0);
            s += x;
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(LogSoftmax, NoUnderflowForDominatedEntries) {
    const auto lp = log_softmax(Vector{0.0, -2000.0});
    EXPECT_NEAR(lp[1], -2000.0, 1e-9);
    EXPECT_TRUE(std::isfinite(lp[1]));
}

TEST(Sigmoid, KnownValues) {
    EXPECT_DOUBLE_EQ(sigmoid(0.0), 0.5);
    EXPECT_NEAR(sigmoid(1.0), 0.7310585786300048793, 1e-15);
    for (double x : {0.3, 2.0, 17.0, 40.0}) {
        EXPECT_NEAR(sigmoid(x) + sigmoid(-x), 1.0, 1e-15);
    }
}

TEST(Sigmoid, InvertsLogit) {
    Rng rng(3);
    for (int i = 0; i < 1000; ++i) {
        const double p = std::exp(rng.uniform(std::log(1e-9), std::log(0.5)));
        for (double q : {p, 1.0 - p}) {
            EXPECT_NEAR(sigmoid(logit(q)), q, 1e-12);
        }
    }
}

TEST(Sigmoid, Monotone) {
    double prev = 0.0;
    for (double x = -30.0; x <= 30.0; x += 0.25) {
        const double s = sigmoid(x);
        EXPECT_GT(s, prev);
        prev = s;
    }
}

TEST(ParameterSet, FlattenRoundTripsExactly) {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        ParameterSet p = random_params(rng);
        Vector v(p.total_dim());
        for (double& x : v) {
            x = rng.normal() * 1e3;
        }
        p.unflatten(v);
        EXPECT_EQ(p.flatten(), v);
        std::size_t sum = 0;
        for (std::size_t b = 0; b < p.block_count(); ++b) {
            sum += p[b].size();
        }
        EXPECT_EQ(p.total_dim(), sum);
    }
}

TEST(ParameterSet, RejectsDuplicateNamesAndBadLengths) {
    ParameterSet p;
    p.add("x", DenseMatrix(2, 2));
    EXPECT_THROW(p.add("x", DenseMatrix(1, 1)), InvalidInput);
    EXPECT_THROW(p.unflatten(Vector(3)), InvalidInput);
    EXPECT_THROW(DenseMatrix(2, 2, Vector(3)), InvalidInput);
}

TEST(Adam, ZeroGradientIsIdentity) {
    Rng rng(9);
    ParameterSet p = random_params(rng);
    const ParameterSet orig = p;
    AdamState s = AdamState::for_parameters(p, 1e-2);
    for (int i = 0; i < 25; ++i) {
        auto r = adam_step(std::move(p), orig.zeros_like(), std::move(s));
        p = std::move(r.params);
        s = std::move(r.state);
        EXPECT_EQ(s.step, static_cast<std::size_t>(i + 1));
    }
    EXPECT_EQ(p, orig);
}

TEST(Adam, FirstStepMatchesReference) {
    // torch.optim.Adam, float64
    ParameterSet p = scalar_params({0.0});
    auto r = adam_step(p, scalar_params({1.0}), AdamState::for_parameters(p, 1e-3));
    EXPECT_NEAR(r.params[0](0, 0), -0.0009999999900000003, 1e-18);
    EXPECT_EQ(r.state.step, 1u);
}

TEST(Adam, ThreeStepsMatchReference) {
    ParameterSet p = scalar_params({0.5, -0.25});
    AdamState s = AdamState::for_parameters(p, 1e-2);
    for (auto g : {Vector{1.0, -2.0}, Vector{-2.0, 0.5}, Vector{0.5, 3.0}}) {
        ParameterSet grad = p.zeros_like();
        grad.unflatten(g);
        auto r = adam_step(std::move(p), grad, std::move(s));
        p = std::move(r.params);
        s = std::move(r.state);
    }
    EXPECT_NEAR(p[0](0, 0), 0.4950279419673822, 1e-15);
    EXPECT_NEAR(p[0](1, 0), -0.2385178875085028, 1e-15);
}

TEST(Adam, DeterministicAndValidated) {
    ParameterSet p = scalar_params({0.1, 0.2});
    const ParameterSet g = scalar_params({0.3, -0.4});
    const AdamState s = AdamState::for_parameters(p, 1e-3);
    const auto a = adam_step(p, g, s);
    const auto b = adam_step(p, g, s);
    EXPECT_EQ(a.params, b.params);
    EXPECT_EQ(a.state, b.state);

    EXPECT_THROW(adam_step(p, scalar_params({1.0}), s), InvalidInput);
    EXPECT_THROW(adam_step(p, scalar_params({1.0, std::nan("")}), s), NumericalError);
    EXPECT_THROW(AdamState::for_parameters(p, 0.0), InvalidInput);
}

TEST(FiniteDifference, QuadraticGivesIdentityGradient) {
    Rng rng(1);
    ParameterSet p = random_params(rng);
    const auto half_norm_sq = [](const ParameterSet& q) { return 0.5 * q.norm() * q.norm(); };
    const auto g = finite_difference_gradient(half_norm_sq, p, 1e-5);
    EXPECT_LT(relative_error(g, p), 1e-9);
}

TEST(FiniteDifference, ConstantLossGivesZero) {
    Rng rng(2);
    ParameterSet p = random_params(rng);
    const auto g = finite_difference_gradient([](const ParameterSet&) { return 4.2; }, p);
    EXPECT_EQ(g.norm(), 0.0);
}

TEST(FiniteDifference, NonFiniteLossRaises) {
    ParameterSet p = scalar_params({1.0});
    EXPECT_THROW(finite_difference_gradient([](const ParameterSet&) { return std::nan(""); }, p), NumericalError);
    EXPECT_THROW(finite_difference_gradient([](const ParameterSet&) { return 0.0; }, p, 0.0), InvalidInput);
}

// Two-layer tanh network with a squared loss; analytic gradient written out
// by hand and compared against the oracle.
TEST(FiniteDifference, MatchesTwoLayerNetworkGradient) {
    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        ParameterSet p;
        p.add("w1", DenseMatrix(4, 3));
        p.add("b1", DenseMatrix(4, 1));
        p.add("w2", DenseMatrix(1, 4));
        for (std::size_t b = 0; b < p.block_count(); ++b) {
            fill_uniform(p[b], rng, -1.0, 1.0);
        }
        const Vector x{rng.normal(), rng.normal(), rng.normal()};
        const double y = rng.normal();
        const auto loss = [&](const ParameterSet& q) {
            Vector h(q[1].data().begin(), q[1].data().end());
            gemv_add(q[0], x, h);
            for (double& v : h) {
                v = std::tanh(v);
            }
            const double out = dot(q[2].row(0), h);
            return 0.5 * (out - y) * (out - y);
        };
        ParameterSet g = p.zeros_like();
        Vector h(p[1].data().begin(), p[1].data().end());
        gemv_add(p[0], x, h);
        for (double& v : h) {
            v = std::tanh(v);
        }
        const double err = dot(p[2].row(0), h) - y;
        axpy(err, h, g[2].row(0));
        Vector dz(4);
        for (std::size_t i = 0; i < 4; ++i) {
            dz[i] = err * p[2](0, i) * (1.0 - h[i] * h[i]);
        }
        ger_add(g[0], dz, x);
        axpy(1.0, dz, g[1].data());
        EXPECT_LT(relative_error(g, finite_difference_gradient(loss, p)), 1e-4);
    }
}
