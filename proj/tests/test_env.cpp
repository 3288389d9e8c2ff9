#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "distill/env.hpp"

using namespace distill;

namespace {

struct ConstantPolicy {
    Action a;
    Action operator()(StateView) const { return a; }
};

}  // namespace

TEST(MountainCar, ResetPositionRangeAndZeroVelocity)
{
    double lo = 1.0, hi = -1.0;
    for (std::uint64_t s = 0; s < 10000; ++s) {
        const auto x = mc_reset(s);
        ASSERT_EQ(x.size(), 2u);
        ASSERT_EQ(x[1], 0.0);
        lo = std::min(lo, x[0]);
        hi = std::max(hi, x[0]);
    }
    EXPECT_GE(lo, -0.6);
    EXPECT_LE(hi, -0.4);
    EXPECT_LT(lo, -0.59);
    EXPECT_GT(hi, -0.41);
    EXPECT_EQ(mc_reset(123), mc_reset(123));
}

TEST(MountainCar, HandEvaluatedStep)
{
    const StateVector s{-0.5, 0.0};
    const auto r = mc_step(s, 2);
    // v' = 0.001 - 0.0025 cos(-1.5); p' = p + v'
    const double v = 0.001 - 0.0025 * std::cos(-1.5);
    EXPECT_NEAR(r.next_state[1], v, 1e-15);
    EXPECT_NEAR(r.next_state[1], 0.000823157, 1e-9);
    EXPECT_NEAR(r.next_state[0], -0.499176843, 1e-9);
    EXPECT_EQ(r.reward, -1.0);
    EXPECT_FALSE(r.done);
    EXPECT_EQ(r.done_reason, DoneReason::Running);
}

TEST(MountainCar, GravityVanishesAtMinusPiOverSix)
{
    const StateVector s{-std::numbers::pi / 6.0, 0.01};
    EXPECT_NEAR(mc_step(s, 1).next_state[1], 0.01, 1e-15);
}

TEST(MountainCar, GoalAndLeftWall)
{
    const auto g = mc_step(StateVector{0.49, 0.07}, 2);
    EXPECT_TRUE(g.done);
    EXPECT_EQ(g.done_reason, DoneReason::Goal);
    EXPECT_GE(g.next_state[0], 0.5);

    const auto w = mc_step(StateVector{-1.19, -0.07}, 0);
    EXPECT_EQ(w.next_state[0], -1.2);
    EXPECT_EQ(w.next_state[1], 0.0);
    EXPECT_FALSE(w.done);
}

TEST(MountainCar, RejectsInvalidAction)
{
    EXPECT_THROW(mc_step(StateVector{-0.5, 0.0}, 3), InvalidInput);
    EXPECT_THROW(mc_step(StateVector{-0.5, 0.0}, -1), InvalidInput);
    EXPECT_THROW(mc_step(StateVector{-0.5}, 1), InvalidInput);
}

TEST(MountainCar, BoundsHoldUnderRandomActions)
{
    Rng rng(17);
    StateVector s = mc_reset(1);
    int episode = 0;
    for (int t = 0; t < 100000; ++t) {
        const auto r = mc_step(s, static_cast<Action>(rng.below(3)));
        ASSERT_GE(r.next_state[0], -1.2);
        ASSERT_LE(r.next_state[0], 0.6);
        ASSERT_GE(r.next_state[1], -0.07);
        ASSERT_LE(r.next_state[1], 0.07);
        s = r.done ? mc_reset(static_cast<std::uint64_t>(++episode)) : r.next_state;
    }
}

TEST(MountainCar, StepIsPure)
{
    const StateVector s{-0.3, 0.02};
    const auto a = mc_step(s, 0);
    const auto b = mc_step(s, 0);
    EXPECT_EQ(a.next_state, b.next_state);
    EXPECT_EQ(a.done_reason, b.done_reason);
}

TEST(CartPole, ResetBoundsAndDeterminism)
{
    for (std::uint64_t s = 0; s < 10000; ++s) {
        const auto x = cp_reset(s);
        ASSERT_EQ(x.size(), 4u);
        for (double v : x) {
            ASSERT_GE(v, -0.05);
            ASSERT_LE(v, 0.05);
        }
    }
    EXPECT_EQ(cp_reset(5), cp_reset(5));
    EXPECT_NE(cp_reset(5), cp_reset(6));
}

TEST(CartPole, HandEvaluatedStepFromZero)
{
    const auto r = cp_step(StateVector{0, 0, 0, 0}, 1);
    // temp = 10/1.1; thetaacc = -temp / (0.5 (4/3 - 0.1/1.1)); xacc = temp - 0.05 thetaacc / 1.1
    const double temp = 10.0 / 1.1;
    const double thetaacc = -temp / (0.5 * (4.0 / 3.0 - 0.1 / 1.1));
    const double xacc = temp - 0.05 * thetaacc / 1.1;
    EXPECT_NEAR(thetaacc, -14.63415, 1e-5);
    EXPECT_NEAR(xacc, 9.756098, 1e-6);
    EXPECT_EQ(r.next_state[0], 0.0);
    EXPECT_NEAR(r.next_state[1], 0.195122, 1e-6);
    EXPECT_EQ(r.next_state[2], 0.0);
    EXPECT_NEAR(r.next_state[3], -0.292683, 1e-6);
    EXPECT_NEAR(r.next_state[1], 0.02 * xacc, 1e-15);
    EXPECT_NEAR(r.next_state[3], 0.02 * thetaacc, 1e-14);
    EXPECT_EQ(r.reward, 1.0);
    EXPECT_FALSE(r.done);
}

TEST(CartPole, MirrorSymmetry)
{
    Rng rng(4);
    for (int i = 0; i < 1000; ++i) {
        StateVector s{rng.uniform(-2, 2), rng.uniform(-1, 1), rng.uniform(-0.2, 0.2), rng.uniform(-1, 1)};
        StateVector m{-s[0], -s[1], -s[2], -s[3]};
        const Action a = static_cast<Action>(rng.below(2));
        const auto r = cp_step(s, a);
        const auto rm = cp_step(m, 1 - a);
        for (int d = 0; d < 4; ++d) {
            ASSERT_NEAR(r.next_state[static_cast<std::size_t>(d)], -rm.next_state[static_cast<std::size_t>(d)], 1e-12);
        }
        ASSERT_EQ(r.done_reason, rm.done_reason);
    }
}

TEST(CartPole, FailureThresholds)
{
    EXPECT_EQ(cp_step(StateVector{2.39, 1.0, 0, 0}, 1).done_reason, DoneReason::Failure);
    EXPECT_EQ(cp_step(StateVector{0, 0, 0.2, 1.0}, 1).done_reason, DoneReason::Failure);
    EXPECT_EQ(cp_step(StateVector{0, 0, 0.0, 0.0}, 1).done_reason, DoneReason::Running);
    EXPECT_THROW(cp_step(StateVector{0, 0, 0, 0}, 2), InvalidInput);
}

TEST(CartPole, EpisodeRewardInRange)
{
    const CartPole env;
    Rng rng(8);
    for (std::uint64_t e = 0; e < 200; ++e) {
        const Action a = static_cast<Action>(rng.below(2));
        const auto tr = rollout(env, ConstantPolicy{a}, env.reset(e));
        ASSERT_GE(tr.total_reward, 1.0);
        ASSERT_LE(tr.total_reward, 200.0);
        ASSERT_EQ(tr.done_reason, DoneReason::Failure);
    }
}

TEST(Rollout, DoNothingMountainCarTimesOut)
{
    const MountainCar env;
    const auto tr = rollout(env, ConstantPolicy{1}, StateVector{-0.5, 0.0});
    EXPECT_EQ(tr.total_reward, -200.0);
    EXPECT_EQ(tr.done_reason, DoneReason::TimeLimit);
    EXPECT_EQ(tr.length(), 200u);
    EXPECT_EQ(tr.states.size(), tr.actions.size() + 1);
    EXPECT_EQ(tr.rewards.size(), tr.actions.size());
}

TEST(Rollout, StepCapOne)
{
    const MountainCar env;
    const auto tr = rollout(env, ConstantPolicy{2}, StateVector{-0.5, 0.0}, 1);
    EXPECT_EQ(tr.length(), 1u);
    EXPECT_EQ(tr.states.size(), 2u);
    EXPECT_EQ(tr.total_reward, -1.0);
}

TEST(Rollout, TraceInvariantsAndRewardRange)
{
    const MountainCar env;
    Rng rng(2);
    for (std::uint64_t e = 0; e < 50; ++e) {
        const auto tr = rollout(env, ConstantPolicy{static_cast<Action>(rng.below(3))}, env.reset(e));
        double sum = 0.0;
        for (double r : tr.rewards) {
            sum += r;
        }
        ASSERT_EQ(sum, tr.total_reward);
        ASSERT_GE(tr.total_reward, -200.0);
        ASSERT_LE(tr.total_reward, -1.0);
    }
}

TEST(Rollout, InvalidControllerActionPropagates)
{
    const MountainCar env;
    EXPECT_THROW(rollout(env, ConstantPolicy{7}, StateVector{-0.5, 0.0}), InvalidInput);
}

TEST(Grid, UnitBoxThreeSteps)
{
    EnvSpec spec;
    spec.state_dim = 2;
    spec.state_lower = {0, 0};
    spec.state_upper = {1, 1};
    const auto g = grid_states(spec, 3);
    ASSERT_EQ(g.size(), 9u);
    for (const StateVector& corner : {StateVector{0, 0}, StateVector{0, 1}, StateVector{1, 0}, StateVector{1, 1}}) {
        EXPECT_NE(std::find(g.begin(), g.end(), corner), g.end());
    }
    EXPECT_NE(std::find(g.begin(), g.end(), StateVector{0.5, 0.5}), g.end());
}

TEST(Grid, SizesForBothEnvs)
{
    EXPECT_EQ(grid_states(MountainCar{}.spec(), 20).size(), 400u);
    EXPECT_EQ(grid_states(MountainCar{}.spec(), 100).size(), 10000u);
    const auto cp = grid_states(CartPole{}.spec(), 5, cartpole_eval_bounds());
    EXPECT_EQ(cp.size(), 625u);
    for (const auto& s : cp) {
        ASSERT_LE(std::abs(s[1]), 0.05);
        ASSERT_LE(std::abs(s[2]), 12.0 * std::numbers::pi / 180.0 + 1e-15);
        ASSERT_LE(std::abs(s[3]), 0.05);
    }
    EXPECT_EQ(cp.front()[2], -12.0 * std::numbers::pi / 180.0);
}

TEST(Grid, SortedAndDuplicateFree)
{
    for (int steps : {2, 3, 7, 20}) {
        const auto g = grid_states(MountainCar{}.spec(), steps);
        EXPECT_TRUE(std::is_sorted(g.begin(), g.end()));
        EXPECT_EQ(std::adjacent_find(g.begin(), g.end()), g.end());
        const auto c = grid_states(CartPole{}.spec(), steps > 7 ? 4 : steps, cartpole_eval_bounds());
        EXPECT_TRUE(std::is_sorted(c.begin(), c.end()));
        EXPECT_EQ(std::adjacent_find(c.begin(), c.end()), c.end());
    }
    EXPECT_THROW(grid_states(MountainCar{}.spec(), 1), InvalidInput);
}

TEST(Scaler, MapsBoundsToUnitBox)
{
    const auto spec = MountainCar{}.spec();
    const auto sc = StateScaler::from_spec(spec);
    const auto lo = sc(spec.state_lower);
    const auto hi = sc(spec.state_upper);
    for (std::size_t d = 0; d < 2; ++d) {
        EXPECT_NEAR(lo[d], -1.0, 1e-15);
        EXPECT_NEAR(hi[d], 1.0, 1e-15);
    }
    EXPECT_EQ(StateScaler::identity(3)(StateVector{1, -2, 3}), (StateVector{1, -2, 3}));
}
