#pragma once

// Imitation datasets: expert rollouts labelled with the expert's greedy
// action, class balancing by downsampling, and stratified splits.

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "distill/common.hpp"
#include "distill/env.hpp"

namespace distill {

struct LabeledDataset {
    int state_dim = 0;
    int action_count = 0;
    // Row-major, size() x state_dim.
    std::vector<double> states;
    std::vector<Action> labels;
    int source_episodes = 0;
    std::uint64_t source_seed = 0;

    LabeledDataset() = default;
    LabeledDataset(int dim, int actions) : state_dim(dim), action_count(actions) {}

    std::size_t size() const { return labels.size(); }
    bool empty() const { return labels.empty(); }

    StateView state(std::size_t i) const
    {
        return {states.data() + i * static_cast<std::size_t>(state_dim), static_cast<std::size_t>(state_dim)};
    }

    void push(StateView s, Action label)
    {
        require_dim(s.size(), static_cast<std::size_t>(state_dim), "LabeledDataset::push");
        require(label >= 0 && label < action_count, "LabeledDataset::push: label out of range");
        states.insert(states.end(), s.begin(), s.end());
        labels.push_back(label);
    }

    std::vector<std::size_t> class_counts() const
    {
        std::vector<std::size_t> counts(static_cast<std::size_t>(action_count), 0);
        for (Action a : labels) {
            ++counts[static_cast<std::size_t>(a)];
        }
        return counts;
    }

    LabeledDataset subset(std::span<const std::size_t> indices) const
    {
        LabeledDataset out(state_dim, action_count);
        out.source_episodes = source_episodes;
        out.source_seed = source_seed;
        out.states.reserve(indices.size() * static_cast<std::size_t>(state_dim));
        out.labels.reserve(indices.size());
        for (std::size_t i : indices) {
            out.push(state(i), labels[i]);
        }
        return out;
    }
};

struct SplitDataset {
    LabeledDataset train;
    LabeledDataset validation;
    double split_ratio = 0.9;
};

// One (state, expert action) pair per expert step; episode j starts from
// env.reset(derive_seed(seed, j)). Episodes may be rolled out in parallel,
// assembly is always in episode order.
template <Environment Env, Policy P>
LabeledDataset collect(const Env& env, const P& expert, int episodes, std::uint64_t seed, std::size_t workers = 1)
{
    require(episodes >= 1, "collect: episodes must be >= 1");
    const EnvSpec& spec = env.spec();
    std::vector<EpisodeTrace> traces(static_cast<std::size_t>(episodes));
    parallel_for(traces.size(), workers, [&](std::size_t j) {
        traces[j] = rollout(env, expert, env.reset(derive_seed(seed, static_cast<std::uint64_t>(j))));
    });
    LabeledDataset ds(spec.state_dim, spec.action_count);
    ds.source_episodes = episodes;
    ds.source_seed = seed;
    for (const auto& trace : traces) {
        for (std::size_t t = 0; t < trace.actions.size(); ++t) {
            ds.push(trace.states[t], trace.actions[t]);
        }
    }
    return ds;
}

namespace detail {

inline std::vector<std::vector<std::size_t>> indices_by_class(const LabeledDataset& ds)
{
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(ds.action_count));
    for (std::size_t i = 0; i < ds.size(); ++i) {
        by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
    }
    return by_class;
}

}  // namespace detail

// Downsamples every class to the smallest class count, then shuffles.
inline LabeledDataset balance(const LabeledDataset& ds, std::uint64_t seed)
{
    auto by_class = detail::indices_by_class(ds);
    std::size_t min_count = std::numeric_limits<std::size_t>::max();
    for (std::size_t k = 0; k < by_class.size(); ++k) {
        if (by_class[k].empty()) {
            throw InvalidInput("balance: class " + std::to_string(k) + " has no samples");
        }
        min_count = std::min(min_count, by_class[k].size());
    }
    Rng rng(seed);
    std::vector<std::size_t> keep;
    keep.reserve(min_count * by_class.size());
    for (auto& members : by_class) {
        rng.shuffle(members);
        keep.insert(keep.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(min_count));
    }
    rng.shuffle(keep);
    return ds.subset(keep);
}

// Per-class train quotas: floor(ratio * n_k) plus largest-remainder top-up so
// that the total is round(ratio * n). Ties go to the lowest class.
inline std::vector<std::size_t> stratified_quotas(const std::vector<std::size_t>& counts, double ratio)
{
    const std::size_t n = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
    const auto target = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
    std::vector<std::size_t> quota(counts.size());
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t k = 0; k < counts.size(); ++k) {
        const double exact = ratio * static_cast<double>(counts[k]);
        quota[k] = static_cast<std::size_t>(std::floor(exact));
        assigned += quota[k];
        remainders.emplace_back(exact - std::floor(exact), k);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t r = 0; assigned < target && r < remainders.size(); ++r) {
        const std::size_t k = remainders[r].second;
        if (quota[k] < counts[k]) {
            ++quota[k];
            ++assigned;
        }
    }
    return quota;
}

inline SplitDataset split(const LabeledDataset& ds, double ratio, std::uint64_t seed)
{
    require(ratio > 0.0 && ratio < 1.0, "split: ratio must be in (0, 1)");
    auto by_class = detail::indices_by_class(ds);
    std::vector<std::size_t> counts;
    for (const auto& members : by_class) {
        counts.push_back(members.size());
    }
    const auto quota = stratified_quotas(counts, ratio);
    Rng rng(seed);
    std::vector<std::size_t> train_idx;
    std::vector<std::size_t> val_idx;
    for (std::size_t k = 0; k < by_class.size(); ++k) {
        auto& members = by_class[k];
        rng.shuffle(members);
        const auto cut = static_cast<std::ptrdiff_t>(quota[k]);
        train_idx.insert(train_idx.end(), members.begin(), members.begin() + cut);
        val_idx.insert(val_idx.end(), members.begin() + cut, members.end());
    }
    if (train_idx.empty() || val_idx.empty()) {
        throw InvalidInput("split: ratio " + format_double(ratio) + " leaves an empty partition for " +
                           std::to_string(ds.size()) + " samples");
    }
    rng.shuffle(train_idx);
    rng.shuffle(val_idx);
    return {ds.subset(train_idx), ds.subset(val_idx), ratio};
}

// Stratified random subset of at most max_points samples.
inline LabeledDataset subsample(const LabeledDataset& ds, std::size_t max_points, std::uint64_t seed)
{
    if (ds.size() <= max_points) {
        return ds;
    }
    auto by_class = detail::indices_by_class(ds);
    std::vector<std::size_t> counts;
    for (const auto& members : by_class) {
        counts.push_back(members.size());
    }
    const auto quota =
        stratified_quotas(counts, static_cast<double>(max_points) / static_cast<double>(ds.size()));
    Rng rng(seed);
    std::vector<std::size_t> keep;
    for (std::size_t k = 0; k < by_class.size(); ++k) {
        rng.shuffle(by_class[k]);
        keep.insert(keep.end(), by_class[k].begin(), by_class[k].begin() + static_cast<std::ptrdiff_t>(quota[k]));
    }
    rng.shuffle(keep);
    return ds.subset(keep);
}

}  // namespace distill
