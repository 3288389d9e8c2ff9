#pragma once

// Soft decision tree: a complete binary tree of depth D whose inner nodes
// route right with probability sigmoid(beta * (w.x + b)) and whose leaves hold
// softmax distributions over actions. beta is one global learnable scalar.
//
// Nodes are numbered in heap order: inner node i has children 2i+1 (left)
// and 2i+2 (right); heap index inner_count() + l is leaf l.
//
// The training loss for a batch is the mean over samples of
//     -sum_l P_l(x) sum_k T_k log Q_lk
// plus an optional balance penalty on each inner node's average routing,
//     -lambda 2^-depth(i) * 0.5 * (log alpha_i + log(1 - alpha_i)),
//     alpha_i = sum_x P_i(x) p_i(x) / sum_x P_i(x).

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "distill/common.hpp"
#include "distill/dataset.hpp"
#include "distill/env.hpp"
#include "distill/nn.hpp"

namespace distill {

enum class SdtRouting {
    // Follow the more probable branch at every node (p >= 0.5 goes right).
    Hard,
    // Argmax of the path-probability-weighted mixture of leaf distributions.
    Expectation,
};

struct SoftTree {
    int depth = 1;
    int state_dim = 0;
    int action_count = 0;
    // inner_count() x state_dim, row-major.
    std::vector<double> filters;
    std::vector<double> biases;
    // leaf_count() x action_count, row-major.
    std::vector<double> leaf_logits;
    double beta = 1.0;
    StateScaler scaler;
    SdtRouting routing = SdtRouting::Hard;

    SoftTree() = default;
    SoftTree(int depth_, int dim, int actions)
        : depth(depth_), state_dim(dim), action_count(actions),
          filters(inner_count() * static_cast<std::size_t>(dim), 0.0), biases(inner_count(), 0.0),
          leaf_logits(leaf_count() * static_cast<std::size_t>(actions), 0.0),
          scaler(StateScaler::identity(static_cast<std::size_t>(dim)))
    {
        require(depth_ >= 1 && depth_ <= 12, "SoftTree: depth must be in [1, 12]");
        require(dim >= 1 && actions >= 2, "SoftTree: bad dimensions");
    }

    std::size_t inner_count() const { return (std::size_t{1} << depth) - 1; }
    std::size_t leaf_count() const { return std::size_t{1} << depth; }
    std::size_t flat_size() const { return filters.size() + biases.size() + leaf_logits.size() + 1; }

    std::span<const double> filter(std::size_t node) const
    {
        return {filters.data() + node * static_cast<std::size_t>(state_dim), static_cast<std::size_t>(state_dim)};
    }
    std::span<const double> logits(std::size_t leaf) const
    {
        return {leaf_logits.data() + leaf * static_cast<std::size_t>(action_count),
                static_cast<std::size_t>(action_count)};
    }

    // Flat layout: filters, biases, leaf logits, beta.
    std::vector<double> pack() const
    {
        std::vector<double> out;
        out.reserve(flat_size());
        out.insert(out.end(), filters.begin(), filters.end());
        out.insert(out.end(), biases.begin(), biases.end());
        out.insert(out.end(), leaf_logits.begin(), leaf_logits.end());
        out.push_back(beta);
        return out;
    }

    void unpack(std::span<const double> flat)
    {
        require_dim(flat.size(), flat_size(), "SoftTree::unpack");
        auto it = flat.begin();
        std::copy(it, it + static_cast<std::ptrdiff_t>(filters.size()), filters.begin());
        it += static_cast<std::ptrdiff_t>(filters.size());
        std::copy(it, it + static_cast<std::ptrdiff_t>(biases.size()), biases.begin());
        it += static_cast<std::ptrdiff_t>(biases.size());
        std::copy(it, it + static_cast<std::ptrdiff_t>(leaf_logits.size()), leaf_logits.begin());
        it += static_cast<std::ptrdiff_t>(leaf_logits.size());
        beta = *it;
    }
};

inline std::size_t sdt_param_count(int depth, int state_dim, int action_count)
{
    const std::size_t leaves = std::size_t{1} << depth;
    return (leaves - 1) * static_cast<std::size_t>(state_dim + 1) + leaves * static_cast<std::size_t>(action_count) + 1;
}

inline std::size_t sdt_param_count(const SoftTree& tree)
{
    return sdt_param_count(tree.depth, tree.state_dim, tree.action_count);
}

namespace detail {

inline constexpr double sdt_log_floor = -27.631021115928547;  // log(1e-12)

inline double sigmoid(double z)
{
    if (z >= 0.0) {
        return 1.0 / (1.0 + std::exp(-z));
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

inline void log_softmax(std::span<const double> logits, std::span<double> out)
{
    double m = logits[0];
    for (double v : logits) {
        m = std::max(m, v);
    }
    double sum = 0.0;
    for (double v : logits) {
        sum += std::exp(v - m);
    }
    const double lse = m + std::log(sum);
    for (std::size_t k = 0; k < logits.size(); ++k) {
        out[k] = logits[k] - lse;
    }
}

// Pre-activations a_i = w_i.x + b_i and right-branch probabilities p_i for
// an already scaled input.
inline void sdt_gates(const SoftTree& tree, const double* x, double* pre, double* prob)
{
    const auto dim = static_cast<std::size_t>(tree.state_dim);
    for (std::size_t i = 0; i < tree.inner_count(); ++i) {
        const double* w = tree.filters.data() + i * dim;
        double a = tree.biases[i];
        for (std::size_t d = 0; d < dim; ++d) {
            a += w[d] * x[d];
        }
        pre[i] = a;
        prob[i] = sigmoid(tree.beta * a);
    }
}

// Arrival probabilities for every heap node (inner and leaf), top-down.
inline void sdt_path_probs(const SoftTree& tree, const double* prob, double* path)
{
    path[0] = 1.0;
    for (std::size_t i = 0; i < tree.inner_count(); ++i) {
        path[2 * i + 1] = path[i] * (1.0 - prob[i]);
        path[2 * i + 2] = path[i] * prob[i];
    }
}

inline std::vector<double> scaled_rows(const SoftTree& tree, std::span<const double> states)
{
    const auto dim = static_cast<std::size_t>(tree.state_dim);
    require(states.size() % dim == 0, "SoftTree: state buffer is not a multiple of state_dim");
    std::vector<double> out(states.size());
    for (std::size_t r = 0; r < states.size() / dim; ++r) {
        tree.scaler.apply(states.subspan(r * dim, dim), std::span<double>(out).subspan(r * dim, dim));
    }
    return out;
}

// Loss and (optionally) gradient in pack() layout, for scaled inputs.
inline double sdt_objective(const SoftTree& tree, std::span<const double> xs, std::span<const double> targets,
                            double lambda, std::vector<double>* grad)
{
    const auto dim = static_cast<std::size_t>(tree.state_dim);
    const auto k_count = static_cast<std::size_t>(tree.action_count);
    const std::size_t inner = tree.inner_count();
    const std::size_t leaves = tree.leaf_count();
    const std::size_t n = xs.size() / dim;
    require(n >= 1, "sdt_loss: empty batch");
    require_dim(targets.size(), n * k_count, "sdt_loss targets");

    // Leaf log-distributions are input independent.
    std::vector<double> log_q(leaves * k_count);
    std::vector<double> q(leaves * k_count);
    std::vector<std::uint8_t> clamped(leaves * k_count);
    for (std::size_t l = 0; l < leaves; ++l) {
        log_softmax(tree.logits(l), std::span<double>(log_q).subspan(l * k_count, k_count));
        for (std::size_t k = 0; k < k_count; ++k) {
            double& v = log_q[l * k_count + k];
            q[l * k_count + k] = std::exp(v);
            if (v < sdt_log_floor) {
                v = sdt_log_floor;
                clamped[l * k_count + k] = 1;
            }
        }
    }

    std::vector<double> pre(n * inner);
    std::vector<double> prob(n * inner);
    std::vector<double> path(n * (inner + leaves));
    for (std::size_t s = 0; s < n; ++s) {
        sdt_gates(tree, xs.data() + s * dim, pre.data() + s * inner, prob.data() + s * inner);
        sdt_path_probs(tree, prob.data() + s * inner, path.data() + s * (inner + leaves));
    }

    const double inv_n = 1.0 / static_cast<double>(n);
    std::vector<double> g_filters;
    std::vector<double> g_biases;
    std::vector<double> g_logits;
    double g_beta = 0.0;
    if (grad) {
        g_filters.assign(tree.filters.size(), 0.0);
        g_biases.assign(inner, 0.0);
        g_logits.assign(tree.leaf_logits.size(), 0.0);
    }

    // Balance penalty statistics.
    std::vector<double> alpha(inner, 0.5);
    std::vector<double> denom(inner, 0.0);
    std::vector<double> d_alpha(inner, 0.0);
    double penalty = 0.0;
    if (lambda > 0.0) {
        std::vector<double> numer(inner, 0.0);
        for (std::size_t s = 0; s < n; ++s) {
            for (std::size_t i = 0; i < inner; ++i) {
                const double pi = path[s * (inner + leaves) + i];
                numer[i] += pi * prob[s * inner + i];
                denom[i] += pi;
            }
        }
        for (std::size_t i = 0; i < inner; ++i) {
            if (denom[i] <= 0.0) {
                continue;
            }
            const int level = static_cast<int>(std::floor(std::log2(static_cast<double>(i + 1))));
            const double weight = lambda * std::ldexp(1.0, -level);
            const double a = std::clamp(numer[i] / denom[i], 1e-12, 1.0 - 1e-12);
            alpha[i] = a;
            penalty -= weight * 0.5 * (std::log(a) + std::log(1.0 - a));
            const bool interior = numer[i] / denom[i] > 1e-12 && numer[i] / denom[i] < 1.0 - 1e-12;
            d_alpha[i] = interior ? -weight * 0.5 * (1.0 / a - 1.0 / (1.0 - a)) : 0.0;
        }
    }

    double total = 0.0;
    std::vector<double> subtree(inner + leaves);
    std::vector<double> reg_sub(inner + leaves);
    std::vector<double> leaf_ce(leaves);
    std::vector<double> dz(inner);
    for (std::size_t s = 0; s < n; ++s) {
        const double* t = targets.data() + s * k_count;
        const double* pp = path.data() + s * (inner + leaves);
        const double* pr = prob.data() + s * inner;
        double sample_loss = 0.0;
        for (std::size_t l = 0; l < leaves; ++l) {
            double c = 0.0;
            for (std::size_t k = 0; k < k_count; ++k) {
                c += t[k] * log_q[l * k_count + k];
            }
            leaf_ce[l] = c;
            sample_loss -= pp[inner + l] * c;
        }
        total += sample_loss;
        if (!grad) {
            continue;
        }

        for (std::size_t l = 0; l < leaves; ++l) {
            const double pl = pp[inner + l];
            double masked_t = 0.0;
            for (std::size_t k = 0; k < k_count; ++k) {
                masked_t += clamped[l * k_count + k] ? 0.0 : t[k];
            }
            for (std::size_t j = 0; j < k_count; ++j) {
                const double tj = clamped[l * k_count + j] ? 0.0 : t[j];
                g_logits[l * k_count + j] -= inv_n * pl * (tj - q[l * k_count + j] * masked_t);
            }
            subtree[inner + l] = pl * leaf_ce[l];
            reg_sub[inner + l] = 0.0;
        }
        for (std::size_t i = inner; i-- > 0;) {
            subtree[i] = subtree[2 * i + 1] + subtree[2 * i + 2];
            const double p = pr[i];
            // d(-sum_l P_l c_l)/dz_i
            double g = -((1.0 - p) * subtree[2 * i + 2] - p * subtree[2 * i + 1]) * inv_n;
            if (lambda > 0.0 && denom[i] > 0.0) {
                g += d_alpha[i] * pp[i] / denom[i] * p * (1.0 - p);
                g += (1.0 - p) * reg_sub[2 * i + 2] - p * reg_sub[2 * i + 1];
                const double r = d_alpha[i] * (p - alpha[i]) / denom[i] * pp[i];
                reg_sub[i] = r + reg_sub[2 * i + 1] + reg_sub[2 * i + 2];
            } else if (lambda > 0.0) {
                g += (1.0 - p) * reg_sub[2 * i + 2] - p * reg_sub[2 * i + 1];
                reg_sub[i] = reg_sub[2 * i + 1] + reg_sub[2 * i + 2];
            }
            dz[i] = g;
        }
        const double* x = xs.data() + s * dim;
        const double* a = pre.data() + s * inner;
        for (std::size_t i = 0; i < inner; ++i) {
            const double gb = dz[i] * tree.beta;
            for (std::size_t d = 0; d < dim; ++d) {
                g_filters[i * dim + d] += gb * x[d];
            }
            g_biases[i] += gb;
            g_beta += dz[i] * a[i];
        }
    }

    if (grad) {
        grad->clear();
        grad->reserve(tree.flat_size());
        grad->insert(grad->end(), g_filters.begin(), g_filters.end());
        grad->insert(grad->end(), g_biases.begin(), g_biases.end());
        grad->insert(grad->end(), g_logits.begin(), g_logits.end());
        grad->push_back(g_beta);
    }
    return total * inv_n + penalty;
}

}  // namespace detail

struct SdtForward {
    // Arrival probability of each leaf.
    std::vector<double> path_probs;
    // leaf_count() x action_count, row-major.
    std::vector<double> leaf_dists;
};

inline SdtForward sdt_forward(const SoftTree& tree, StateView x)
{
    require_dim(x.size(), static_cast<std::size_t>(tree.state_dim), "sdt_forward");
    const StateVector xs = tree.scaler(x);
    const std::size_t inner = tree.inner_count();
    const std::size_t leaves = tree.leaf_count();
    const auto k_count = static_cast<std::size_t>(tree.action_count);
    std::vector<double> pre(inner);
    std::vector<double> prob(inner);
    std::vector<double> path(inner + leaves);
    detail::sdt_gates(tree, xs.data(), pre.data(), prob.data());
    detail::sdt_path_probs(tree, prob.data(), path.data());
    SdtForward out;
    out.path_probs.assign(path.begin() + static_cast<std::ptrdiff_t>(inner), path.end());
    out.leaf_dists.resize(leaves * k_count);
    for (std::size_t l = 0; l < leaves; ++l) {
        auto dst = std::span<double>(out.leaf_dists).subspan(l * k_count, k_count);
        detail::log_softmax(tree.logits(l), dst);
        for (double& v : dst) {
            v = std::exp(v);
        }
    }
    return out;
}

// Mean weighted cross entropy (plus balance penalty when lambda > 0).
// states: n x state_dim row-major in raw units; targets: n x action_count.
inline double sdt_loss(const SoftTree& tree, std::span<const double> states, std::span<const double> targets,
                       double lambda = 0.0)
{
    const auto xs = detail::scaled_rows(tree, states);
    return detail::sdt_objective(tree, xs, targets, lambda, nullptr);
}

struct SdtLossGradient {
    double loss = 0.0;
    // pack() layout.
    std::vector<double> grad;
};

inline SdtLossGradient sdt_loss_gradient(const SoftTree& tree, std::span<const double> states,
                                         std::span<const double> targets, double lambda = 0.0)
{
    const auto xs = detail::scaled_rows(tree, states);
    SdtLossGradient out;
    out.loss = detail::sdt_objective(tree, xs, targets, lambda, &out.grad);
    return out;
}

inline std::vector<double> one_hot(std::span<const Action> labels, int action_count)
{
    std::vector<double> t(labels.size() * static_cast<std::size_t>(action_count), 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        t[i * static_cast<std::size_t>(action_count) + static_cast<std::size_t>(labels[i])] = 1.0;
    }
    return t;
}

inline Action predict_sdt(const SoftTree& tree, StateView state)
{
    require_dim(state.size(), static_cast<std::size_t>(tree.state_dim), "predict_sdt");
    const StateVector x = tree.scaler(state);
    const auto k_count = static_cast<std::size_t>(tree.action_count);
    std::vector<double> dist(k_count);
    if (tree.routing == SdtRouting::Hard) {
        const auto dim = static_cast<std::size_t>(tree.state_dim);
        std::size_t at = 0;
        while (at < tree.inner_count()) {
            double a = tree.biases[at];
            for (std::size_t d = 0; d < dim; ++d) {
                a += tree.filters[at * dim + d] * x[d];
            }
            at = detail::sigmoid(tree.beta * a) >= 0.5 ? 2 * at + 2 : 2 * at + 1;
        }
        detail::log_softmax(tree.logits(at - tree.inner_count()), dist);
        for (double& v : dist) {
            v = std::exp(v);
        }
        return static_cast<Action>(argmax(dist));
    }
    const auto fwd = sdt_forward(tree, state);
    for (std::size_t l = 0; l < tree.leaf_count(); ++l) {
        for (std::size_t k = 0; k < k_count; ++k) {
            dist[k] += fwd.path_probs[l] * fwd.leaf_dists[l * k_count + k];
        }
    }
    return static_cast<Action>(argmax(dist));
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class SdtOptimizer { Adam, Sgd };

struct SdtConfig {
    double beta0 = 1.0;
    double learning_rate = 0.01;
    int batch_size = 64;
    int epochs = 10;
    double lambda = 0.0;
    double init_scale = 0.1;
    SdtOptimizer optimizer = SdtOptimizer::Adam;
    SdtRouting routing = SdtRouting::Hard;
    bool scale_inputs = true;

    void validate() const
    {
        require(batch_size >= 1, "SdtConfig: batch_size must be >= 1");
        require(epochs >= 0, "SdtConfig: epochs must be >= 0");
        require(learning_rate > 0.0, "SdtConfig: learning_rate must be positive");
        require(lambda >= 0.0, "SdtConfig: lambda must be >= 0");
    }
};

struct SdtTrainResult {
    SoftTree tree;
    // Mean minibatch loss per epoch.
    std::vector<double> loss_trace;
};

inline SoftTree init_sdt(int depth, int state_dim, int action_count, const SdtConfig& config, std::uint64_t seed)
{
    SoftTree tree(depth, state_dim, action_count);
    Rng rng(seed);
    for (double& w : tree.filters) {
        w = rng.uniform(-config.init_scale, config.init_scale);
    }
    tree.beta = config.beta0;
    tree.routing = config.routing;
    return tree;
}

// Minibatch training on a labelled dataset. The scaler (if any) must already
// be set on the result of init; `scaler` overrides it when provided.
inline SdtTrainResult train_sdt(const LabeledDataset& ds, int depth, const SdtConfig& config, std::uint64_t seed,
                                const StateScaler* scaler = nullptr)
{
    config.validate();
    require(depth >= 1 && depth <= 12, "train_sdt: depth must be in [1, 12]");
    if (ds.empty()) {
        throw InvalidInput("train_sdt: empty dataset");
    }
    SdtTrainResult result{init_sdt(depth, ds.state_dim, ds.action_count, config, derive_seed(seed, "init")), {}};
    if (scaler) {
        result.tree.scaler = *scaler;
    }
    if (config.epochs == 0) {
        return result;
    }
    SoftTree& tree = result.tree;
    const auto dim = static_cast<std::size_t>(ds.state_dim);
    const auto k_count = static_cast<std::size_t>(ds.action_count);
    const auto xs = detail::scaled_rows(tree, ds.states);
    const auto targets = one_hot(ds.labels, ds.action_count);

    std::vector<double> params = tree.pack();
    nn::AdamState adam(params.size(), config.learning_rate);
    Rng rng(derive_seed(seed, "batches"));
    std::vector<std::size_t> order(ds.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<double> batch_x;
    std::vector<double> batch_t;
    std::vector<double> grad;
    const auto bs = static_cast<std::size_t>(config.batch_size);

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::size_t end = std::min(order.size(), start + bs);
            batch_x.clear();
            batch_t.clear();
            for (std::size_t j = start; j < end; ++j) {
                const std::size_t i = order[j];
                batch_x.insert(batch_x.end(), xs.begin() + static_cast<std::ptrdiff_t>(i * dim),
                               xs.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim));
                batch_t.insert(batch_t.end(), targets.begin() + static_cast<std::ptrdiff_t>(i * k_count),
                               targets.begin() + static_cast<std::ptrdiff_t>((i + 1) * k_count));
            }
            const double loss = detail::sdt_objective(tree, batch_x, batch_t, config.lambda, &grad);
            if (!std::isfinite(loss)) {
                throw TrainingDiverged("train_sdt: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                       std::to_string(batches) + " (depth " + std::to_string(depth) + ")");
            }
            if (config.optimizer == SdtOptimizer::Adam) {
                nn::adam_update(params, grad, adam);
            } else {
                nn::sgd_update(params, grad, config.learning_rate);
            }
            tree.unpack(params);
            loss_sum += loss;
            ++batches;
        }
        result.loss_trace.push_back(loss_sum / static_cast<double>(batches));
    }
    return result;
}

inline double accuracy_percent(const SoftTree& tree, const LabeledDataset& ds)
{
    std::size_t hits = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        hits += predict_sdt(tree, ds.state(i)) == ds.labels[i] ? 1 : 0;
    }
    return ds.empty() ? 0.0 : 100.0 * static_cast<double>(hits) / static_cast<double>(ds.size());
}

}  // namespace distill
