#pragma once

// Controller evaluation: empirical value functions over seed-state grids,
// normalized RMS distance between them, policy agreement on a state grid,
// and mean episode reward with a 95% confidence interval.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "distill/common.hpp"
#include "distill/env.hpp"

namespace distill {

// Evaluation-facing view of any trained model.
struct Controller {
    std::string label;
    // "mlp", "hdt", "sdt" or "km".
    std::string kind;
    // Tree depth for trees, parameter count otherwise.
    int depth_or_params = 0;
    std::size_t param_count = 0;
    std::function<Action(StateView)> act;

    Action operator()(StateView s) const { return act(s); }
};

struct EvfTable {
    std::vector<StateVector> seed_states;
    std::vector<double> returns;
    double gamma_eval = 1.0;
    int step_cap = 200;
};

inline double discounted_return(std::span<const double> rewards, double gamma)
{
    double total = 0.0;
    double weight = 1.0;
    for (double r : rewards) {
        total += weight * r;
        weight *= gamma;
    }
    return total;
}

// One deterministic rollout per seed state.
template <Environment Env, Policy P>
EvfTable estimate_evf(const Env& env, const P& controller, std::vector<StateVector> seed_states, double gamma_eval,
                      int step_cap, std::size_t workers = 1)
{
    require(step_cap >= 1, "estimate_evf: step_cap must be >= 1");
    EvfTable table;
    table.gamma_eval = gamma_eval;
    table.step_cap = step_cap;
    table.returns.assign(seed_states.size(), 0.0);
    parallel_for(seed_states.size(), workers, [&](std::size_t j) {
        const auto trace = rollout(env, controller, seed_states[j], step_cap);
        table.returns[j] = discounted_return(trace.rewards, gamma_eval);
    });
    for (std::size_t j = 0; j < table.returns.size(); ++j) {
        if (!std::isfinite(table.returns[j])) {
            throw std::runtime_error("estimate_evf: non-finite return at seed state " + std::to_string(j));
        }
    }
    table.seed_states = std::move(seed_states);
    return table;
}

enum class NrmseNormalization { Student, Expert };

inline double rmse(const EvfTable& expert, const EvfTable& student)
{
    require(expert.seed_states == student.seed_states, "nrmse: tables must share seed states in the same order");
    require(!expert.returns.empty(), "nrmse: empty tables");
    double sq = 0.0;
    for (std::size_t i = 0; i < expert.returns.size(); ++i) {
        const double d = expert.returns[i] - student.returns[i];
        sq += d * d;
    }
    return std::sqrt(sq / static_cast<double>(expert.returns.size()));
}

// RMS difference divided by the largest absolute value of the normalizing
// table (the student's by default).
inline double nrmse(const EvfTable& expert, const EvfTable& student,
                    NrmseNormalization by = NrmseNormalization::Student)
{
    const double r = rmse(expert, student);
    const auto& norm_table = by == NrmseNormalization::Student ? student : expert;
    double max_abs = 0.0;
    for (double v : norm_table.returns) {
        max_abs = std::max(max_abs, std::abs(v));
    }
    if (max_abs == 0.0) {
        throw InvalidInput("nrmse: normalizing value function is identically zero");
    }
    return r / max_abs;
}

// Percent of grid states where the two policies choose the same action.
template <Policy A, Policy B>
double policy_accuracy(const A& expert, const B& student, const std::vector<StateVector>& grid)
{
    require(!grid.empty(), "policy_accuracy: empty grid");
    std::size_t agree = 0;
    for (const auto& s : grid) {
        agree += expert(StateView(s)) == student(StateView(s)) ? 1 : 0;
    }
    return 100.0 * static_cast<double>(agree) / static_cast<double>(grid.size());
}

struct MeanCi {
    double mean = 0.0;
    double ci95_half_width = 0.0;
};

// Half-width 1.96 s / sqrt(n) with the sample standard deviation s.
inline MeanCi mean_ci95(std::span<const double> values)
{
    require(values.size() >= 2, "mean_ci95: need at least two values");
    const auto n = static_cast<double>(values.size());
    double mean = 0.0;
    for (double v : values) {
        mean += v;
    }
    mean /= n;
    double ss = 0.0;
    for (double v : values) {
        ss += (v - mean) * (v - mean);
    }
    return {mean, 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n)};
}

struct Performance {
    double mean = 0.0;
    double ci95_half_width = 0.0;
    std::vector<double> episode_rewards;
};

// Episode j starts from env.reset(derive_seed(base_seed, j)).
template <Environment Env, Policy P>
Performance performance_ci(const Env& env, const P& controller, int n_episodes, std::uint64_t base_seed,
                           std::size_t workers = 1)
{
    require(n_episodes >= 2, "performance_ci: n_episodes must be >= 2");
    Performance perf;
    perf.episode_rewards.assign(static_cast<std::size_t>(n_episodes), 0.0);
    parallel_for(perf.episode_rewards.size(), workers, [&](std::size_t j) {
        perf.episode_rewards[j] = rollout(env, controller, env.reset(derive_seed(base_seed, j))).total_reward;
    });
    const auto ci = mean_ci95(perf.episode_rewards);
    perf.mean = ci.mean;
    perf.ci95_half_width = ci.ci95_half_width;
    return perf;
}

struct MetricsReport {
    std::string label;
    std::string kind;
    int depth_or_params = 0;
    double mean_reward = 0.0;
    double ci95_half_width = 0.0;
    double nrmse = 0.0;
    double acc_pct = 0.0;
    std::size_t param_count = 0;
    int n_eval_episodes = 0;
    std::uint64_t seed = 0;
    // Set when this controller could not be evaluated.
    std::optional<std::string> failure;
};

struct EvalConfig {
    int evf_steps = 20;
    int accuracy_steps = 100;
    int episodes = 100;
    double gamma_eval = 1.0;
    std::optional<Bounds> evf_bounds;
    std::optional<Bounds> accuracy_bounds;
    NrmseNormalization normalize_by = NrmseNormalization::Student;
    std::uint64_t base_seed = 0;
    std::size_t workers = 1;

    static EvalConfig defaults_for(const EnvSpec& spec)
    {
        EvalConfig c;
        if (spec.name == "cartpole") {
            c.evf_steps = 5;
            c.accuracy_steps = 10;
            c.evf_bounds = cartpole_eval_bounds();
            c.accuracy_bounds = cartpole_eval_bounds();
        }
        return c;
    }
};

// One report per controller, expert first. The expert's row compares it with
// itself (NRMSE 0, accuracy 100).
template <Environment Env>
std::vector<MetricsReport> evaluate_all(const Env& env, const Controller& expert,
                                        const std::vector<Controller>& students, const EvalConfig& config)
{
    const EnvSpec& spec = env.spec();
    const auto evf_grid = grid_states(spec, config.evf_steps, config.evf_bounds);
    const auto acc_grid = grid_states(spec, config.accuracy_steps, config.accuracy_bounds);
    const EvfTable expert_evf = estimate_evf(env, expert, evf_grid, config.gamma_eval, spec.max_steps, config.workers);

    std::vector<MetricsReport> reports;
    const auto evaluate = [&](const Controller& c) {
        MetricsReport r;
        r.label = c.label;
        r.kind = c.kind;
        r.depth_or_params = c.depth_or_params;
        r.param_count = c.param_count;
        r.n_eval_episodes = config.episodes;
        r.seed = config.base_seed;
        try {
            const EvfTable evf = estimate_evf(env, c, evf_grid, config.gamma_eval, spec.max_steps, config.workers);
            r.nrmse = nrmse(expert_evf, evf, config.normalize_by);
            r.acc_pct = policy_accuracy(expert, c, acc_grid);
            const auto perf = performance_ci(env, c, config.episodes, config.base_seed, config.workers);
            r.mean_reward = perf.mean;
            r.ci95_half_width = perf.ci95_half_width;
        } catch (const std::exception& e) {
            r.failure = e.what();
        }
        return r;
    };
    reports.push_back(evaluate(expert));
    for (const auto& s : students) {
        reports.push_back(evaluate(s));
    }
    return reports;
}

}  // namespace distill
