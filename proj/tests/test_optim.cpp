#include <cmath>

#include <gtest/gtest.h>

#include "thermalgen/ops.hpp"
#include "thermalgen/optim.hpp"

using namespace thermalgen;

namespace {

void grad_of_square(Tensor& w) {
    w.zero_grad();
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(square(w)));
}

}  // namespace

TEST(AdamW, SingleStepDescends) {
    Tensor w({1}, {1.0}, true);
    AdamW opt({w}, {.lr = 0.1});
    grad_of_square(w);
    opt.step();
    EXPECT_LT(w[0], 1.0);
    // first Adam step moves by lr * sign(g) up to eps
    EXPECT_NEAR(w[0], 0.9, 1e-7);
    EXPECT_EQ(opt.state().step, 1);
}

TEST(AdamW, DecoupledDecayWithZeroGradient) {
    Tensor w({2}, {2.0, -4.0}, true);
    w.ensure_grad();
    AdamW opt({w}, {.lr = 0.1, .weight_decay = 0.5});
    opt.step();
    EXPECT_DOUBLE_EQ(w[0], 2.0 * (1.0 - 0.1 * 0.5));
    EXPECT_DOUBLE_EQ(w[1], -4.0 * (1.0 - 0.1 * 0.5));
}

TEST(AdamW, ConvergesOnConvexQuadratic) {
    // f(w) = sum (w - c)^2 has minimizer w* = c
    const Tensor c({3}, {0.5, -1.25, 2.0});
    Tensor w = Tensor::zeros({3}, true);
    AdamW opt({w}, {.lr = 0.05});
    for (int i = 0; i < 500; ++i) {
        Tape tape;
        {
            TapeScope scope(tape);
            tape.backward(sum(square(sub(w, c))));
        }
        opt.step();
        opt.zero_grad();
    }
    for (std::size_t i = 0; i < 3; ++i) EXPECT_LT(std::abs(w[i] - c[i]), 1e-3);
}

TEST(AdamW, MissingGradientIsContractError) {
    Tensor w({1}, {1.0}, true);
    AdamW opt({w}, {});
    EXPECT_THROW(opt.step(), ContractError);
}

TEST(AdamW, NonPositiveLearningRateRejected) {
    Tensor w({1}, {1.0}, true);
    w.ensure_grad();
    AdamW opt({w}, {.lr = 0.0});
    EXPECT_THROW(opt.step(), DomainError);
}

TEST(AdamW, StateAdvancesOncePerStep) {
    Tensor w({1}, {1.0}, true);
    AdamWState state;
    std::vector<Tensor> params{w};
    for (int i = 1; i <= 3; ++i) {
        grad_of_square(w);
        adamw_step(params, {}, state);
        EXPECT_EQ(state.step, i);
    }
    ASSERT_EQ(state.m.size(), 1u);
    EXPECT_NE(state.m[0][0], 0.0);
    EXPECT_NE(state.v[0][0], 0.0);
}
