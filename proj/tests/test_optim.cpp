#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "mim/kernels.h"
#include "mim/optim.h"
#include "mim/rng.h"
#include "mim/tensor.h"

using mim::AdamwHyper;
using mim::ContractError;
using mim::Gradients;
using mim::LrSchedule;
using mim::NumericError;
using mim::OptimizerState;
using mim::ParamStore;
using mim::RangeError;
using mim::Tensor;

TEST_SUITE_BEGIN("optim");

TEST_CASE("schedule hits the reference points") {
    const LrSchedule s{1.5e-3, 0.0, 100, 1000};
    CHECK(mim::lr_at(s, 0) == 0.0);
    CHECK(mim::lr_at(s, 50) == doctest::Approx(7.5e-4).epsilon(1e-12));
    CHECK(mim::lr_at(s, 100) == doctest::Approx(1.5e-3).epsilon(1e-12));
    CHECK(std::abs(mim::lr_at(s, 550) - 7.5e-4) <= 1e-9);
    // Frozen from an independent evaluation of the closed form.
    CHECK(mim::lr_at(s, 250) == doctest::Approx(0.001399519052838329).epsilon(1e-12));
    CHECK(mim::lr_at(s, 775) == doctest::Approx(0.0002196699141100894).epsilon(1e-12));
    CHECK(std::abs(mim::lr_at(s, 999) - 4.5692566572053116e-09) <= 1e-14);
    CHECK(mim::lr_at(s, 1000) == 0.0);

    const LrSchedule floor{2.0e-3, 1e-4, 10, 200};
    CHECK(mim::lr_at(floor, 200) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(mim::lr_at(floor, 10) == doctest::Approx(2.0e-3).epsilon(1e-12));
}

TEST_CASE("schedule is monotone and continuous at the warmup boundary") {
    const LrSchedule s{2.5e-3, 1e-4, 37, 311};
    double prev = -1.0;
    for (std::int64_t step = 0; step <= 37; ++step) {
        const double lr = mim::lr_at(s, step);
        CHECK(lr >= 0.0);
        CHECK(lr >= prev);
        prev = lr;
    }
    CHECK(prev == doctest::Approx(s.base_lr).epsilon(1e-12));
    for (std::int64_t step = 37; step <= 311; ++step) {
        const double lr = mim::lr_at(s, step);
        CHECK(lr >= 0.0);
        CHECK(lr <= prev + 1e-15);
        prev = lr;
    }
    // The linear ramp extrapolated one step past warmup stays within one
    // ramp increment of the cosine branch.
    const double ramp_step = s.base_lr / double(s.warmup_steps);
    CHECK(std::abs(mim::lr_at(s, 37) - mim::lr_at(s, 36) - ramp_step) <= ramp_step);
    CHECK(std::abs(mim::lr_at(s, 37) - s.base_lr) <= 1e-12);
}

TEST_CASE("schedule validation") {
    CHECK_THROWS_AS(mim::lr_at(LrSchedule{1e-3, 0.0, 100, 100}, 0), RangeError);
    CHECK_THROWS_AS(mim::lr_at(LrSchedule{1e-3, 2e-3, 10, 100}, 0), RangeError);
    CHECK_THROWS_AS(mim::lr_at(LrSchedule{-1e-3, -2e-3, 10, 100}, 0), RangeError);
    const LrSchedule ok{1e-3, 0.0, 10, 100};
    CHECK_THROWS_AS(mim::lr_at(ok, -1), RangeError);
    CHECK_THROWS_AS(mim::lr_at(ok, 101), RangeError);
}

TEST_CASE("zero gradient with zero decay is the identity") {
    mim::Rng rng(1);
    ParamStore params;
    Tensor w({37});
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<float>(rng.normal());
    params.add("w", std::move(w));
    const ParamStore before = params;

    Gradients grads;
    grads.accum("w", {37});
    AdamwHyper h;
    h.weight_decay = 0.0f;
    OptimizerState state(h);
    mim::adamw_step(params, grads, state, 1e-3);

    CHECK(params.bit_equal(before));
    CHECK(state.step_count() == 1);
    CHECK(state.moment1("w").size() == 37);
    for (std::size_t i = 0; i < 37; ++i) {
        CHECK(state.moment1("w")[i] == 0.0f);
        CHECK(state.moment2("w")[i] == 0.0f);
    }
}

TEST_CASE("decoupled decay matches w*(1 - lr*wd) exactly") {
    ParamStore params;
    params.add("w", Tensor::from({3}, {1.0f, -2.5f, 0.75f}));
    Gradients grads;
    grads.accum("w", {3});

    AdamwHyper h;
    h.weight_decay = 5e-2f;
    OptimizerState state(h);
    const double lr = 1e-3;
    mim::adamw_step(params, grads, state, lr);

    const double decay = 1.0 - lr * double(h.weight_decay);
    CHECK(params.get("w")[0] == static_cast<float>(1.0 * decay));
    CHECK(params.get("w")[1] == static_cast<float>(-2.5 * decay));
    CHECK(params.get("w")[2] == static_cast<float>(0.75 * decay));
    CHECK(params.get("w")[0] == doctest::Approx(1.0 - 5e-5).epsilon(1e-7));
}

TEST_CASE("first step follows the bias-corrected closed form") {
    ParamStore params;
    params.add("w", Tensor::from({1}, {1.0f}));
    Gradients grads;
    grads.accum("w", {1})[0] = 0.5f;

    AdamwHyper h;
    h.weight_decay = 0.0f;
    OptimizerState state(h);
    mim::adamw_step(params, grads, state, 1e-3);

    // After bias correction the first update is -lr*g/(|g| + eps); the
    // stored f32 can sit half an ulp (~3e-8 here) from the f64 value.
    const double expect = 1.0 - 1e-3 * 0.5 / (0.5 + double(h.epsilon));
    CHECK(params.get("w")[0] == doctest::Approx(expect).epsilon(1e-7));
    // Frozen from an independent f64 emulation of the update.
    CHECK(params.get("w")[0] == 0.9990000128746033f);
}

TEST_CASE("moments evolve and frozen entries stay untouched") {
    ParamStore params;
    params.add("w", Tensor::from({2}, {1.0f, 2.0f}));
    params.add("frozen", Tensor::from({2}, {5.0f, 6.0f}), false);
    const Tensor frozen_before = params.get("frozen");

    OptimizerState state;
    for (int step = 0; step < 3; ++step) {
        Gradients grads;
        auto& g = grads.accum("w", {2});
        g[0] = 0.1f;
        g[1] = -0.2f;
        mim::adamw_step(params, grads, state, 1e-3);
    }
    CHECK(state.step_count() == 3);
    CHECK(params.get("frozen").bit_equal(frozen_before));
    CHECK(!state.has_moments("frozen"));
    REQUIRE(state.moment_names() == std::vector<std::string>{"w"});
    CHECK(state.moment1("w")[0] > 0.0f);
    CHECK(state.moment2("w")[1] > 0.0f);
}

TEST_CASE("gradient bookkeeping errors") {
    ParamStore params;
    params.add("w", Tensor({2}));
    params.add("frozen", Tensor({2}), false);
    OptimizerState state;

    SUBCASE("missing gradient") {
        Gradients grads;
        CHECK_THROWS_AS(mim::adamw_step(params, grads, state, 1e-3), ContractError);
    }
    SUBCASE("gradient for a frozen parameter") {
        Gradients grads;
        grads.accum("w", {2});
        grads.accum("frozen", {2});
        CHECK_THROWS_AS(mim::adamw_step(params, grads, state, 1e-3), ContractError);
    }
    SUBCASE("shape mismatch") {
        Gradients grads;
        grads.accum("w", {3});
        CHECK_THROWS_AS(mim::adamw_step(params, grads, state, 1e-3), ContractError);
    }
    SUBCASE("non-finite gradient names the parameter") {
        Gradients grads;
        grads.accum("w", {2})[1] = std::nanf("");
        try {
            mim::adamw_step(params, grads, state, 1e-3);
            FAIL("NaN gradient should throw");
        } catch (const NumericError& e) {
            CHECK(std::string(e.what()).find("w") != std::string::npos);
        }
    }
    // A failed step must not advance the counter.
    CHECK(state.step_count() == 0);
}

TEST_CASE("finite differences recover simple gradients") {
    ParamStore params;
    params.add("w", Tensor::from({4}, {1.0f, 2.0f, 3.0f, 4.0f}));
    const auto sum_sq = [](const ParamStore& p) {
        double s = 0.0;
        const Tensor& w = p.get("w");
        for (std::size_t i = 0; i < w.size(); ++i) s += double(w[i]) * double(w[i]);
        return s;
    };
    Gradients g = mim::finite_diff_grad(sum_sq, params, 1e-3f);
    const Tensor& gw = g.get("w");
    CHECK(gw[0] == doctest::Approx(2.0).epsilon(1e-4));
    CHECK(gw[1] == doctest::Approx(4.0).epsilon(1e-4));
    CHECK(gw[2] == doctest::Approx(6.0).epsilon(1e-4));
    CHECK(gw[3] == doctest::Approx(8.0).epsilon(1e-4));

    ParamStore single;
    single.add("w", Tensor::from({1}, {3.0f}));
    const auto square = [](const ParamStore& p) {
        const double w = p.get("w")[0];
        return w * w;
    };
    Gradients g2 = mim::finite_diff_grad(square, single, 1e-3f);
    CHECK(std::abs(double(g2.get("w")[0]) - 6.0) <= 1e-5);

    // Sampled variant agrees with the full sweep.
    const std::vector<mim::CoordRef> coords{{"w", 0}};
    const std::vector<double> at = mim::finite_diff_at(square, single, 1e-3f, coords);
    REQUIRE(at.size() == 1);
    CHECK(at[0] == doctest::Approx(double(g2.get("w")[0])).epsilon(1e-9));
}

TEST_CASE("finite differences skip frozen entries and reject bad objectives") {
    ParamStore params;
    params.add("w", Tensor({2}));
    params.add("frozen", Tensor({2}), false);
    const auto zero = [](const ParamStore&) { return 0.0; };
    Gradients g = mim::finite_diff_grad(zero, params, 1e-3f);
    CHECK(g.find("w") != nullptr);
    CHECK(g.find("frozen") == nullptr);

    const auto bad = [](const ParamStore&) { return std::nan(""); };
    CHECK_THROWS_AS(mim::finite_diff_grad(bad, params, 1e-3f), NumericError);
    CHECK_THROWS_AS(mim::finite_diff_grad(zero, params, 0.0f), RangeError);
}

TEST_SUITE_END();
