#pragma once

// Classic-control environments, rollouts and state grids.
//
// Both environments are pure functions of (state, action); all randomness is
// confined to reset(seed). The time limit is enforced by rollout(), not by the
// step functions, so step() never reports TimeLimit.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "distill/common.hpp"

namespace distill {

enum class RewardScheme { PerStepMinusOne, PerStepPlusOne };

enum class DoneReason { Running, Goal, Failure, TimeLimit };

inline const char* to_string(DoneReason r)
{
    switch (r) {
    case DoneReason::Running: return "running";
    case DoneReason::Goal: return "goal";
    case DoneReason::Failure: return "failure";
    case DoneReason::TimeLimit: return "time_limit";
    }
    return "?";
}

struct EnvSpec {
    std::string name;
    int state_dim = 0;
    int action_count = 0;
    std::vector<double> state_lower;
    std::vector<double> state_upper;
    int max_steps = 200;
    RewardScheme reward_scheme = RewardScheme::PerStepMinusOne;
    // Episode outcome that counts as solving the task.
    DoneReason success_reason = DoneReason::Goal;
};

struct StepResult {
    StateVector next_state;
    double reward = 0.0;
    bool done = false;
    DoneReason done_reason = DoneReason::Running;
};

struct EpisodeTrace {
    std::vector<StateVector> states;
    std::vector<Action> actions;
    std::vector<double> rewards;
    double total_reward = 0.0;
    DoneReason done_reason = DoneReason::Running;

    std::size_t length() const { return actions.size(); }
};

template <class E>
concept Environment = requires(const E& env, std::uint64_t seed, StateView s, Action a) {
    { env.spec() } -> std::convertible_to<const EnvSpec&>;
    { env.reset(seed) } -> std::same_as<StateVector>;
    { env.step(s, a) } -> std::same_as<StepResult>;
};

template <class P>
concept Policy = requires(const P& p, StateView s) {
    { p(s) } -> std::convertible_to<Action>;
};

// ---------------------------------------------------------------------------
// MountainCar
// ---------------------------------------------------------------------------

namespace mountain_car {
inline constexpr double min_position = -1.2;
inline constexpr double max_position = 0.6;
inline constexpr double max_speed = 0.07;
inline constexpr double goal_position = 0.5;
inline constexpr double force = 0.001;
inline constexpr double gravity = 0.0025;
inline constexpr double reset_low = -0.6;
inline constexpr double reset_high = -0.4;
}  // namespace mountain_car

inline StateVector mc_reset(std::uint64_t rng_seed)
{
    Rng rng(rng_seed);
    return {rng.uniform(mountain_car::reset_low, mountain_car::reset_high), 0.0};
}

// Actions: 0 push left, 1 no push, 2 push right.
inline StepResult mc_step(StateView state, Action action)
{
    using namespace mountain_car;
    require_dim(state.size(), 2, "mc_step");
    if (action < 0 || action > 2) {
        throw InvalidInput("mc_step: invalid action " + std::to_string(action));
    }
    double position = state[0];
    double velocity = state[1];
    velocity += (action - 1) * force - gravity * std::cos(3.0 * position);
    velocity = std::clamp(velocity, -max_speed, max_speed);
    position += velocity;
    position = std::clamp(position, min_position, max_position);
    if (position == min_position) {
        velocity = 0.0;
    }
    StepResult r;
    r.next_state = {position, velocity};
    r.reward = -1.0;
    r.done = position >= goal_position;
    r.done_reason = r.done ? DoneReason::Goal : DoneReason::Running;
    return r;
}

struct MountainCar {
    EnvSpec spec_{"mountaincar",
                  2,
                  3,
                  {mountain_car::min_position, -mountain_car::max_speed},
                  {mountain_car::max_position, mountain_car::max_speed},
                  200,
                  RewardScheme::PerStepMinusOne,
                  DoneReason::Goal};

    const EnvSpec& spec() const { return spec_; }
    StateVector reset(std::uint64_t seed) const { return mc_reset(seed); }
    StepResult step(StateView s, Action a) const { return mc_step(s, a); }
};

// ---------------------------------------------------------------------------
// CartPole
// ---------------------------------------------------------------------------

namespace cart_pole {
inline constexpr double gravity = 9.8;
inline constexpr double mass_cart = 1.0;
inline constexpr double mass_pole = 0.1;
inline constexpr double total_mass = mass_cart + mass_pole;
inline constexpr double half_length = 0.5;
inline constexpr double pole_mass_length = mass_pole * half_length;
inline constexpr double force_mag = 10.0;
inline constexpr double tau = 0.02;
inline constexpr double theta_threshold = 12.0 * std::numbers::pi / 180.0;
inline constexpr double x_threshold = 2.4;
inline constexpr double reset_bound = 0.05;
// Nominal ranges for the unbounded velocities, used for grids and input scaling.
inline constexpr double nominal_cart_speed = 3.0;
inline constexpr double nominal_pole_speed = 3.5;
}  // namespace cart_pole

inline StateVector cp_reset(std::uint64_t rng_seed)
{
    Rng rng(rng_seed);
    StateVector s(4);
    for (auto& v : s) {
        v = rng.uniform(-cart_pole::reset_bound, cart_pole::reset_bound);
    }
    return s;
}

// State: (x, x_dot, theta, theta_dot); theta in radians. Actions: 0 left, 1 right.
inline StepResult cp_step(StateView state, Action action)
{
    using namespace cart_pole;
    require_dim(state.size(), 4, "cp_step");
    if (action < 0 || action > 1) {
        throw InvalidInput("cp_step: invalid action " + std::to_string(action));
    }
    const double x = state[0];
    const double x_dot = state[1];
    const double theta = state[2];
    const double theta_dot = state[3];
    const double force = action == 1 ? force_mag : -force_mag;
    const double cos_t = std::cos(theta);
    const double sin_t = std::sin(theta);
    const double temp = (force + pole_mass_length * theta_dot * theta_dot * sin_t) / total_mass;
    const double theta_acc = (gravity * sin_t - cos_t * temp) /
                             (half_length * (4.0 / 3.0 - mass_pole * cos_t * cos_t / total_mass));
    const double x_acc = temp - pole_mass_length * theta_acc * cos_t / total_mass;

    StepResult r;
    r.next_state = {x + tau * x_dot, x_dot + tau * x_acc, theta + tau * theta_dot,
                    theta_dot + tau * theta_acc};
    r.reward = 1.0;
    const double nx = r.next_state[0];
    const double nt = r.next_state[2];
    r.done = nx < -x_threshold || nx > x_threshold || nt < -theta_threshold || nt > theta_threshold;
    r.done_reason = r.done ? DoneReason::Failure : DoneReason::Running;
    return r;
}

struct CartPole {
    EnvSpec spec_{"cartpole",
                  4,
                  2,
                  {-cart_pole::x_threshold, -cart_pole::nominal_cart_speed,
                   -cart_pole::theta_threshold, -cart_pole::nominal_pole_speed},
                  {cart_pole::x_threshold, cart_pole::nominal_cart_speed,
                   cart_pole::theta_threshold, cart_pole::nominal_pole_speed},
                  200,
                  RewardScheme::PerStepPlusOne,
                  DoneReason::TimeLimit};

    const EnvSpec& spec() const { return spec_; }
    StateVector reset(std::uint64_t seed) const { return cp_reset(seed); }
    StepResult step(StateView s, Action a) const { return cp_step(s, a); }
};

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

template <Environment Env, Policy P>
EpisodeTrace rollout(const Env& env, const P& controller, StateVector start, int step_cap)
{
    require(step_cap >= 1, "rollout: step_cap must be >= 1");
    require_dim(start.size(), static_cast<std::size_t>(env.spec().state_dim), "rollout");
    const int action_count = env.spec().action_count;
    EpisodeTrace trace;
    trace.states.reserve(static_cast<std::size_t>(step_cap) + 1);
    trace.states.push_back(std::move(start));
    for (int t = 0; t < step_cap; ++t) {
        const Action a = controller(StateView(trace.states.back()));
        if (a < 0 || a >= action_count) {
            throw InvalidInput("rollout: controller returned invalid action " + std::to_string(a));
        }
        StepResult r = env.step(trace.states.back(), a);
        trace.actions.push_back(a);
        trace.rewards.push_back(r.reward);
        trace.total_reward += r.reward;
        trace.states.push_back(std::move(r.next_state));
        if (r.done) {
            trace.done_reason = r.done_reason;
            return trace;
        }
    }
    trace.done_reason = DoneReason::TimeLimit;
    return trace;
}

template <Environment Env, Policy P>
EpisodeTrace rollout(const Env& env, const P& controller, StateVector start)
{
    return rollout(env, controller, std::move(start), env.spec().max_steps);
}

// ---------------------------------------------------------------------------
// State grids
// ---------------------------------------------------------------------------

struct Bounds {
    std::vector<double> lower;
    std::vector<double> upper;
};

// Cartesian product of inclusive uniform grids, first dimension varying
// slowest, so the output is sorted lexicographically.
inline std::vector<StateVector> grid_states(const EnvSpec& spec, int steps_per_dim,
                                            const std::optional<Bounds>& override_bounds = std::nullopt)
{
    require(steps_per_dim >= 2, "grid_states: steps_per_dim must be >= 2");
    const auto& lower = override_bounds ? override_bounds->lower : spec.state_lower;
    const auto& upper = override_bounds ? override_bounds->upper : spec.state_upper;
    const auto dim = static_cast<std::size_t>(spec.state_dim);
    require_dim(lower.size(), dim, "grid_states lower bounds");
    require_dim(upper.size(), dim, "grid_states upper bounds");

    std::vector<std::vector<double>> axes(dim);
    for (std::size_t d = 0; d < dim; ++d) {
        require(lower[d] < upper[d], "grid_states: lower bound must be below upper bound");
        axes[d].resize(static_cast<std::size_t>(steps_per_dim));
        for (int i = 0; i < steps_per_dim; ++i) {
            const double frac = static_cast<double>(i) / (steps_per_dim - 1);
            axes[d][static_cast<std::size_t>(i)] =
                i == steps_per_dim - 1 ? upper[d] : lower[d] + (upper[d] - lower[d]) * frac;
        }
    }

    std::size_t total = 1;
    for (std::size_t d = 0; d < dim; ++d) {
        total *= static_cast<std::size_t>(steps_per_dim);
    }
    std::vector<StateVector> grid;
    grid.reserve(total);
    std::vector<std::size_t> idx(dim, 0);
    for (std::size_t n = 0; n < total; ++n) {
        StateVector s(dim);
        for (std::size_t d = 0; d < dim; ++d) {
            s[d] = axes[d][idx[d]];
        }
        grid.push_back(std::move(s));
        for (std::size_t d = dim; d-- > 0;) {
            if (++idx[d] < static_cast<std::size_t>(steps_per_dim)) {
                break;
            }
            idx[d] = 0;
        }
    }
    return grid;
}

// CartPole evaluation region: full cart range and non-terminating angles,
// velocities restricted to the reset range.
inline Bounds cartpole_eval_bounds()
{
    using namespace cart_pole;
    return {{-x_threshold, -reset_bound, -theta_threshold, -reset_bound},
            {x_threshold, reset_bound, theta_threshold, reset_bound}};
}

// Affine map from the environment box onto [-1, 1]^d. Fixed, not trained.
struct StateScaler {
    std::vector<double> center;
    std::vector<double> half_range;

    static StateScaler identity(std::size_t dim) { return {std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0)}; }

    static StateScaler from_spec(const EnvSpec& spec)
    {
        StateScaler s;
        for (int d = 0; d < spec.state_dim; ++d) {
            s.center.push_back(0.5 * (spec.state_upper[d] + spec.state_lower[d]));
            s.half_range.push_back(0.5 * (spec.state_upper[d] - spec.state_lower[d]));
        }
        return s;
    }

    std::size_t dim() const { return center.size(); }

    void apply(StateView in, std::span<double> out) const
    {
        require_dim(in.size(), dim(), "StateScaler");
        for (std::size_t d = 0; d < in.size(); ++d) {
            out[d] = (in[d] - center[d]) / half_range[d];
        }
    }

    StateVector operator()(StateView in) const
    {
        StateVector out(in.size());
        apply(in, out);
        return out;
    }
};

}  // namespace distill
