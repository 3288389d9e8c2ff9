#pragma once

// CART hard decision tree: axis-aligned thresholds, Gini impurity, depth cap.
//
// Candidate splits are scored exactly. Minimizing the weighted Gini impurity
// of the children is equivalent to maximizing
//     sum_k cL_k^2 / nL + sum_k cR_k^2 / nR,
// a rational number that is compared by cross-multiplication in 128-bit
// integers. Equal-gain candidates therefore tie exactly and the tie rule
// (lowest feature, then lowest threshold) is deterministic.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "distill/common.hpp"
#include "distill/dataset.hpp"

namespace distill {

inline double gini(std::span<const std::size_t> counts)
{
    const double n = std::accumulate(counts.begin(), counts.end(), 0.0);
    if (n == 0.0) {
        return 0.0;
    }
    double sum_sq = 0.0;
    for (auto c : counts) {
        sum_sq += (static_cast<double>(c) / n) * (static_cast<double>(c) / n);
    }
    return 1.0 - sum_sq;
}

struct HardTree {
    struct Node {
        // -1 marks a leaf.
        int feature = -1;
        double threshold = 0.0;
        int left = -1;
        int right = -1;
        int depth = 0;
        std::vector<std::size_t> counts;
        Action prediction = 0;

        bool is_leaf() const { return feature < 0; }
    };

    int state_dim = 0;
    int action_count = 0;
    int max_depth = 0;
    // Root is nodes[0].
    std::vector<Node> nodes;

    std::size_t inner_count() const
    {
        return static_cast<std::size_t>(
            std::count_if(nodes.begin(), nodes.end(), [](const Node& n) { return !n.is_leaf(); }));
    }

    std::size_t leaf_count() const { return nodes.size() - inner_count(); }

    // Deepest leaf, in edges from the root.
    int depth() const
    {
        int d = 0;
        for (const auto& n : nodes) {
            d = std::max(d, n.depth);
        }
        return d;
    }
};

namespace detail {

// Exact nonnegative rational num/den.
struct SplitScore {
    __int128 num = 0;
    __int128 den = 1;

    bool greater_than(const SplitScore& o) const { return num * o.den > o.num * den; }
};

inline SplitScore children_score(std::int64_t sum_sq_left, std::int64_t n_left, std::int64_t sum_sq_right,
                                 std::int64_t n_right)
{
    return {static_cast<__int128>(sum_sq_left) * n_right + static_cast<__int128>(sum_sq_right) * n_left,
            static_cast<__int128>(n_left) * n_right};
}

inline double midpoint_threshold(double lo, double hi)
{
    double t = lo + (hi - lo) / 2.0;
    if (!(t >= lo && t < hi)) {
        t = lo;
    }
    return t;
}

class CartBuilder {
public:
    CartBuilder(const LabeledDataset& ds, HardTree& tree) : ds_(ds), tree_(tree) {}

    int build(std::vector<std::size_t>& idx, int depth)
    {
        const auto k = static_cast<std::size_t>(ds_.action_count);
        HardTree::Node node;
        node.depth = depth;
        node.counts.assign(k, 0);
        for (auto i : idx) {
            ++node.counts[static_cast<std::size_t>(ds_.labels[i])];
        }
        node.prediction = static_cast<Action>(argmax(node.counts));
        const int id = static_cast<int>(tree_.nodes.size());
        tree_.nodes.push_back(node);

        const auto nonzero = std::count_if(node.counts.begin(), node.counts.end(), [](auto c) { return c > 0; });
        if (nonzero <= 1 || depth >= tree_.max_depth || idx.size() < 2) {
            return id;
        }
        std::int64_t parent_sq = 0;
        for (auto c : node.counts) {
            parent_sq += static_cast<std::int64_t>(c) * static_cast<std::int64_t>(c);
        }
        const SplitScore parent{parent_sq, static_cast<__int128>(idx.size())};

        int best_feature = -1;
        double best_threshold = 0.0;
        SplitScore best = parent;
        std::vector<std::size_t> sorted = idx;
        std::vector<std::size_t> left(k);
        std::vector<std::size_t> right(k);
        const auto dim = static_cast<std::size_t>(ds_.state_dim);
        for (std::size_t f = 0; f < dim; ++f) {
            std::stable_sort(sorted.begin(), sorted.end(),
                             [&](std::size_t a, std::size_t b) { return value(a, f) < value(b, f); });
            std::fill(left.begin(), left.end(), 0);
            right = node.counts;
            std::int64_t sq_left = 0;
            std::int64_t sq_right = parent_sq;
            for (std::size_t pos = 0; pos + 1 < sorted.size(); ++pos) {
                const auto c = static_cast<std::size_t>(ds_.labels[sorted[pos]]);
                sq_left += 2 * static_cast<std::int64_t>(left[c]) + 1;
                sq_right -= 2 * static_cast<std::int64_t>(right[c]) - 1;
                ++left[c];
                --right[c];
                const double lo = value(sorted[pos], f);
                const double hi = value(sorted[pos + 1], f);
                if (!(lo < hi)) {
                    continue;
                }
                const auto n_left = static_cast<std::int64_t>(pos + 1);
                const auto n_right = static_cast<std::int64_t>(sorted.size()) - n_left;
                const SplitScore score = children_score(sq_left, n_left, sq_right, n_right);
                if (score.greater_than(best)) {
                    best = score;
                    best_feature = static_cast<int>(f);
                    best_threshold = midpoint_threshold(lo, hi);
                }
            }
        }
        if (best_feature < 0) {
            return id;
        }

        std::vector<std::size_t> left_idx;
        std::vector<std::size_t> right_idx;
        for (auto i : idx) {
            (value(i, static_cast<std::size_t>(best_feature)) <= best_threshold ? left_idx : right_idx).push_back(i);
        }
        idx.clear();
        idx.shrink_to_fit();
        tree_.nodes[static_cast<std::size_t>(id)].feature = best_feature;
        tree_.nodes[static_cast<std::size_t>(id)].threshold = best_threshold;
        const int l = build(left_idx, depth + 1);
        const int r = build(right_idx, depth + 1);
        tree_.nodes[static_cast<std::size_t>(id)].left = l;
        tree_.nodes[static_cast<std::size_t>(id)].right = r;
        return id;
    }

private:
    double value(std::size_t i, std::size_t f) const
    {
        return ds_.states[i * static_cast<std::size_t>(ds_.state_dim) + f];
    }

    const LabeledDataset& ds_;
    HardTree& tree_;
};

}  // namespace detail

// Greedy recursive best-Gini-gain splits. A node becomes a leaf when it is
// pure, at max_depth, or when no split strictly lowers the impurity.
inline HardTree train_hdt(const LabeledDataset& ds, int max_depth)
{
    if (ds.empty()) {
        throw InvalidInput("train_hdt: empty dataset");
    }
    require(max_depth >= 1, "train_hdt: max_depth must be >= 1");
    HardTree tree;
    tree.state_dim = ds.state_dim;
    tree.action_count = ds.action_count;
    tree.max_depth = max_depth;
    std::vector<std::size_t> idx(ds.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    detail::CartBuilder(ds, tree).build(idx, 0);
    return tree;
}

// value <= threshold goes left.
inline Action predict_hdt(const HardTree& tree, StateView state)
{
    require_dim(state.size(), static_cast<std::size_t>(tree.state_dim), "predict_hdt");
    std::size_t at = 0;
    while (!tree.nodes[at].is_leaf()) {
        const auto& n = tree.nodes[at];
        at = static_cast<std::size_t>(state[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right);
    }
    return tree.nodes[at].prediction;
}

// One feature index and one threshold per inner node.
inline std::size_t hdt_param_count(const HardTree& tree) { return 2 * tree.inner_count(); }

inline double accuracy_percent(const HardTree& tree, const LabeledDataset& ds)
{
    std::size_t hits = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        hits += predict_hdt(tree, ds.state(i)) == ds.labels[i] ? 1 : 0;
    }
    return ds.empty() ? 0.0 : 100.0 * static_cast<double>(hits) / static_cast<double>(ds.size());
}

}  // namespace distill
