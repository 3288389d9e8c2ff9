#pragma once

// DQN expert training: replay buffer, epsilon-greedy exploration, target
// network, squared temporal-difference loss.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "distill/common.hpp"
#include "distill/env.hpp"
#include "distill/nn.hpp"

namespace distill {

// Greedy Q-policy. Inputs are mapped through a fixed scaler before the net.
struct QPolicy {
    nn::Mlp net;
    StateScaler scaler;
    int action_count = 0;

    std::size_t parameter_count() const { return net.parameter_count(); }

    Action operator()(StateView state) const;
};

inline std::vector<double> q_values(const QPolicy& policy, StateView state)
{
    require_dim(state.size(), policy.scaler.dim(), "q_values");
    return nn::forward(policy.net, policy.scaler(state));
}

// Argmax with ties broken by the lowest index.
inline Action greedy_action(std::span<const double> q)
{
    require(!q.empty(), "greedy_action: empty q vector");
    return static_cast<Action>(argmax(q));
}

inline Action greedy_action(const QPolicy& policy, StateView state)
{
    const auto q = q_values(policy, state);
    return greedy_action(std::span<const double>(q));
}

inline Action QPolicy::operator()(StateView state) const { return greedy_action(*this, state); }

// ---------------------------------------------------------------------------
// Replay buffer
// ---------------------------------------------------------------------------

class ReplayBuffer {
public:
    ReplayBuffer(std::size_t capacity, std::size_t state_dim)
        : capacity_(capacity), dim_(state_dim), states_(capacity * state_dim), next_states_(capacity * state_dim),
          actions_(capacity), rewards_(capacity), terminal_(capacity)
    {
        require(capacity >= 1, "ReplayBuffer: capacity must be >= 1");
    }

    std::size_t size() const { return size_; }
    std::size_t capacity() const { return capacity_; }
    std::size_t state_dim() const { return dim_; }

    // FIFO eviction once full.
    void push(StateView s, Action a, double r, StateView next, bool terminal)
    {
        require_dim(s.size(), dim_, "ReplayBuffer::push state");
        require_dim(next.size(), dim_, "ReplayBuffer::push next state");
        std::copy(s.begin(), s.end(), states_.begin() + static_cast<std::ptrdiff_t>(head_ * dim_));
        std::copy(next.begin(), next.end(), next_states_.begin() + static_cast<std::ptrdiff_t>(head_ * dim_));
        actions_[head_] = a;
        rewards_[head_] = r;
        terminal_[head_] = terminal ? 1 : 0;
        head_ = (head_ + 1) % capacity_;
        size_ = std::min(size_ + 1, capacity_);
        ++pushed_;
    }

    // Distinct slot indices, uniform among stored transitions.
    std::vector<std::size_t> sample_indices(std::size_t batch, Rng& rng) const
    {
        require(batch <= size_, "ReplayBuffer::sample: batch larger than buffer");
        std::vector<std::size_t> out;
        out.reserve(batch);
        while (out.size() < batch) {
            const std::size_t i = rng.below(size_);
            if (std::find(out.begin(), out.end(), i) == out.end()) {
                out.push_back(i);
            }
        }
        return out;
    }

    // Slot of the k-th oldest stored transition.
    std::size_t oldest_slot(std::size_t k = 0) const
    {
        return (head_ + capacity_ - size_ + k) % capacity_;
    }

    StateView state(std::size_t slot) const { return {states_.data() + slot * dim_, dim_}; }
    StateView next_state(std::size_t slot) const { return {next_states_.data() + slot * dim_, dim_}; }
    Action action(std::size_t slot) const { return actions_[slot]; }
    double reward(std::size_t slot) const { return rewards_[slot]; }
    bool terminal(std::size_t slot) const { return terminal_[slot] != 0; }
    std::uint64_t total_pushed() const { return pushed_; }

private:
    std::size_t capacity_;
    std::size_t dim_;
    std::vector<double> states_;
    std::vector<double> next_states_;
    std::vector<Action> actions_;
    std::vector<double> rewards_;
    std::vector<std::uint8_t> terminal_;
    std::size_t head_ = 0;
    std::size_t size_ = 0;
    std::uint64_t pushed_ = 0;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct DqnConfig {
    std::vector<int> hidden_layers{24, 48};
    double gamma = 0.99;
    int episodes = 400;
    double epsilon_start = 1.0;
    double epsilon_end = 0.05;
    // Per-episode multiplicative decay.
    double epsilon_decay = 0.99;
    int batch_size = 32;
    int replay_capacity = 50000;
    int warmup = 1000;
    int target_sync_interval = 500;
    int train_every = 1;
    double learning_rate = 1e-3;
    // 0 disables clipping.
    double grad_clip = 10.0;
    // Checkpoint selection: every eval_interval episodes the greedy policy is
    // scored on eval_episodes fixed starts and the best snapshot is kept.
    // 0 disables selection (the last iterate is returned).
    int eval_interval = 10;
    int eval_episodes = 20;
    // Stop once this fraction of greedy evaluation episodes succeed.
    std::optional<double> target_success;
    bool scale_inputs = true;

    void validate() const
    {
        require(gamma > 0.0 && gamma <= 1.0, "DqnConfig: gamma must be in (0, 1]");
        require(epsilon_start >= 0.0 && epsilon_start <= 1.0, "DqnConfig: epsilon_start must be in [0, 1]");
        require(epsilon_end >= 0.0 && epsilon_end <= 1.0, "DqnConfig: epsilon_end must be in [0, 1]");
        require(epsilon_decay > 0.0 && epsilon_decay <= 1.0, "DqnConfig: epsilon_decay must be in (0, 1]");
        require(episodes >= 1, "DqnConfig: episodes must be >= 1");
        require(batch_size >= 1, "DqnConfig: batch_size must be >= 1");
        require(replay_capacity >= batch_size, "DqnConfig: replay_capacity must be >= batch_size");
        require(target_sync_interval >= 1, "DqnConfig: target_sync_interval must be >= 1");
        require(train_every >= 1, "DqnConfig: train_every must be >= 1");
        require(learning_rate > 0.0, "DqnConfig: learning_rate must be positive");
        require(eval_interval >= 0 && eval_episodes >= 1, "DqnConfig: bad evaluation settings");
        for (int h : hidden_layers) {
            require(h >= 1, "DqnConfig: hidden layer sizes must be positive");
        }
    }

    double epsilon_at(int episode) const
    {
        return std::max(epsilon_end, epsilon_start * std::pow(epsilon_decay, episode));
    }
};

struct DqnEpisodeLog {
    int episode = 0;
    double reward = 0.0;
    double epsilon = 0.0;
    // Mean squared TD error over the episode's updates (0 if none).
    double loss = 0.0;
    // Greedy evaluation mean, when evaluated after this episode.
    std::optional<double> eval_reward;
    std::optional<double> eval_success;
};

struct DqnResult {
    QPolicy policy;
    std::vector<DqnEpisodeLog> log;
    int selected_episode = -1;
    double selected_eval_reward = 0.0;
    double selected_eval_success = 0.0;
};

struct GreedyScore {
    double mean_reward = 0.0;
    double success_fraction = 0.0;

    // Success first, then reward.
    bool better_than(const GreedyScore& other) const
    {
        if (success_fraction != other.success_fraction) {
            return success_fraction > other.success_fraction;
        }
        return mean_reward > other.mean_reward;
    }
};

template <Environment Env, Policy P>
GreedyScore score_greedy(const Env& env, const P& policy, std::uint64_t seed, int episodes)
{
    GreedyScore score;
    int successes = 0;
    for (int j = 0; j < episodes; ++j) {
        const auto trace = rollout(env, policy, env.reset(derive_seed(seed, static_cast<std::uint64_t>(j))));
        score.mean_reward += trace.total_reward;
        successes += trace.done_reason == env.spec().success_reason ? 1 : 0;
    }
    score.mean_reward /= episodes;
    score.success_fraction = static_cast<double>(successes) / episodes;
    return score;
}

template <Environment Env>
DqnResult train_dqn(const Env& env, const DqnConfig& config, std::uint64_t seed)
{
    config.validate();
    const EnvSpec& spec = env.spec();
    const auto dim = static_cast<std::size_t>(spec.state_dim);
    const int actions = spec.action_count;

    std::vector<int> sizes{spec.state_dim};
    sizes.insert(sizes.end(), config.hidden_layers.begin(), config.hidden_layers.end());
    sizes.push_back(actions);

    QPolicy online{nn::make_mlp(sizes, derive_seed(seed, "init")),
                   config.scale_inputs ? StateScaler::from_spec(spec) : StateScaler::identity(dim), actions};
    nn::Mlp target = online.net;
    nn::AdamState adam(online.net.parameter_count(), config.learning_rate);
    ReplayBuffer buffer(static_cast<std::size_t>(config.replay_capacity), dim);
    Rng rng(derive_seed(seed, "explore"));
    const std::uint64_t eval_seed = derive_seed(seed, "eval");

    DqnResult result;
    std::optional<QPolicy> best;
    GreedyScore best_score{-std::numeric_limits<double>::infinity(), -1.0};

    const auto batch = static_cast<Eigen::Index>(config.batch_size);
    Eigen::MatrixXd states(static_cast<Eigen::Index>(dim), batch);
    Eigen::MatrixXd next_states(static_cast<Eigen::Index>(dim), batch);
    Eigen::MatrixXd upstream(actions, batch);
    std::int64_t total_steps = 0;

    for (int episode = 0; episode < config.episodes; ++episode) {
        const double epsilon = config.epsilon_at(episode);
        StateVector state = env.reset(derive_seed(seed, static_cast<std::uint64_t>(episode)));
        StateVector scaled = online.scaler(state);
        double episode_reward = 0.0;
        double loss_sum = 0.0;
        int updates = 0;

        for (int t = 0; t < spec.max_steps; ++t) {
            Action a;
            if (rng.uniform() < epsilon) {
                a = static_cast<Action>(rng.below(static_cast<std::size_t>(actions)));
            } else {
                const auto q = nn::forward(online.net, scaled);
                a = greedy_action(std::span<const double>(q));
            }
            StepResult step = env.step(state, a);
            StateVector next_scaled = online.scaler(step.next_state);
            buffer.push(scaled, a, step.reward, next_scaled, step.done);
            episode_reward += step.reward;
            ++total_steps;

            if (buffer.size() >= static_cast<std::size_t>(std::max(config.warmup, config.batch_size)) &&
                total_steps % config.train_every == 0) {
                const auto idx = buffer.sample_indices(static_cast<std::size_t>(config.batch_size), rng);
                for (Eigen::Index j = 0; j < batch; ++j) {
                    const auto slot = idx[static_cast<std::size_t>(j)];
                    const auto s = buffer.state(slot);
                    const auto ns = buffer.next_state(slot);
                    for (std::size_t d = 0; d < dim; ++d) {
                        states(static_cast<Eigen::Index>(d), j) = s[d];
                        next_states(static_cast<Eigen::Index>(d), j) = ns[d];
                    }
                }
                const auto cache = nn::forward_batch(online.net, states);
                const auto target_q = nn::forward_batch(target, next_states);
                upstream.setZero();
                double loss = 0.0;
                for (Eigen::Index j = 0; j < batch; ++j) {
                    const auto slot = idx[static_cast<std::size_t>(j)];
                    double y = buffer.reward(slot);
                    if (!buffer.terminal(slot)) {
                        y += config.gamma * target_q.output().col(j).maxCoeff();
                    }
                    const Action aj = buffer.action(slot);
                    const double err = cache.output()(aj, j) - y;
                    loss += err * err;
                    upstream(aj, j) = 2.0 * err / static_cast<double>(batch);
                }
                loss /= static_cast<double>(batch);
                if (!std::isfinite(loss)) {
                    throw TrainingDiverged("train_dqn: non-finite TD loss at episode " + std::to_string(episode) +
                                           ", step " + std::to_string(t));
                }
                auto grads = nn::backward(online.net, cache, upstream);
                if (config.grad_clip > 0.0) {
                    nn::clip_by_norm(grads, config.grad_clip);
                }
                nn::adam_step(online.net, grads, adam);
                loss_sum += loss;
                ++updates;
            }
            if (total_steps % config.target_sync_interval == 0) {
                target = online.net;
            }

            state = std::move(step.next_state);
            scaled = std::move(next_scaled);
            if (step.done) {
                break;
            }
        }
        if (!online.net.all_finite()) {
            throw TrainingDiverged("train_dqn: non-finite weights after episode " + std::to_string(episode));
        }

        DqnEpisodeLog entry{episode, episode_reward, epsilon, updates > 0 ? loss_sum / updates : 0.0, {}, {}};
        bool stop = false;
        if (config.eval_interval > 0 && (episode + 1) % config.eval_interval == 0) {
            const GreedyScore score = score_greedy(env, online, eval_seed, config.eval_episodes);
            entry.eval_reward = score.mean_reward;
            entry.eval_success = score.success_fraction;
            if (score.better_than(best_score)) {
                best_score = score;
                best = online;
                result.selected_episode = episode;
                result.selected_eval_reward = score.mean_reward;
                result.selected_eval_success = score.success_fraction;
            }
            stop = config.target_success && score.success_fraction >= *config.target_success;
        }
        result.log.push_back(entry);
        if (stop) {
            break;
        }
    }

    result.policy = best ? std::move(*best) : std::move(online);
    if (!best) {
        result.selected_episode = static_cast<int>(result.log.size()) - 1;
    }
    return result;
}

}  // namespace distill
