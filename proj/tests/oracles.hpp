#pragma once

// Reference implementations for the test suites. They share data layouts
// with the library but none of its numerics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "distill/dataset.hpp"
#include "distill/hdt.hpp"
#include "distill/km.hpp"
#include "distill/nn.hpp"
#include "distill/sdt.hpp"

namespace oracle {

using distill::Rng;

// Plain loops over the documented layout: per layer, W (out x in, row-major)
// then b.
inline std::vector<double> mlp_forward(const std::vector<int>& sizes, const std::vector<double>& params,
                                       const std::vector<double>& x)
{
    std::vector<double> a = x;
    std::size_t off = 0;
    for (std::size_t l = 1; l < sizes.size(); ++l) {
        const auto in = static_cast<std::size_t>(sizes[l - 1]);
        const auto out = static_cast<std::size_t>(sizes[l]);
        std::vector<double> z(out, 0.0);
        for (std::size_t r = 0; r < out; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < in; ++c) {
                s += params[off + r * in + c] * a[c];
            }
            z[r] = s + params[off + out * in + r];
            if (l + 1 < sizes.size()) {
                z[r] = z[r] > 0.0 ? z[r] : 0.0;
            }
        }
        off += out * in + out;
        a = std::move(z);
    }
    return a;
}

inline double relative_error(double a, double b)
{
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

// Gradient of u . f(x) vs central differences, h = 1e-5. Returns the worst
// relative error over all parameters.
inline double mlp_gradient_error(Rng& rng)
{
    const int hidden = static_cast<int>(rng.below(4));
    std::vector<int> sizes{1 + static_cast<int>(rng.below(5))};
    for (int h = 0; h < hidden; ++h) {
        sizes.push_back(1 + static_cast<int>(rng.below(16)));
    }
    sizes.push_back(1 + static_cast<int>(rng.below(4)));
    distill::nn::Mlp net = distill::nn::make_mlp(sizes, rng());
    for (double& p : net.params) {
        p += rng.uniform(-0.1, 0.1);
    }
    std::vector<double> x(static_cast<std::size_t>(sizes.front()));
    for (double& v : x) {
        v = rng.uniform(-2, 2);
    }
    std::vector<double> u(static_cast<std::size_t>(sizes.back()));
    for (double& v : u) {
        v = rng.uniform(-1, 1);
    }
    const auto g = distill::nn::backward(net, x, u);
    const auto objective = [&](const std::vector<double>& params) {
        const auto y = mlp_forward(sizes, params, x);
        double s = 0.0;
        for (std::size_t k = 0; k < y.size(); ++k) {
            s += u[k] * y[k];
        }
        return s;
    };
    const double h = 1e-5;
    double worst = 0.0;
    std::vector<double> p = net.params;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double keep = p[i];
        p[i] = keep + h;
        const double up = objective(p);
        p[i] = keep - h;
        const double down = objective(p);
        p[i] = keep;
        worst = std::max(worst, relative_error(g[i], (up - down) / (2 * h)));
    }
    return worst;
}

// Path probability of every leaf as a product along its root-to-leaf path.
inline std::vector<double> sdt_leaf_probs(const distill::SoftTree& t, const std::vector<double>& x_scaled)
{
    const std::size_t leaves = std::size_t{1} << t.depth;
    std::vector<double> out(leaves);
    for (std::size_t leaf = 0; leaf < leaves; ++leaf) {
        double p = 1.0;
        std::size_t node = 0;
        for (int level = 0; level < t.depth; ++level) {
            const bool right = (leaf >> (t.depth - 1 - level)) & 1u;
            double a = t.biases[node];
            for (std::size_t d = 0; d < x_scaled.size(); ++d) {
                a += t.filters[node * x_scaled.size() + d] * x_scaled[d];
            }
            const double pr = 1.0 / (1.0 + std::exp(-t.beta * a));
            p *= right ? pr : 1.0 - pr;
            node = 2 * node + (right ? 2 : 1);
        }
        out[leaf] = p;
    }
    return out;
}

// Random tree and batch; gradient of the full objective (cross entropy and
// balance penalty) vs central differences over every packed parameter.
inline double sdt_gradient_error(Rng& rng)
{
    const int depth = 1 + static_cast<int>(rng.below(4));
    const int dim = 1 + static_cast<int>(rng.below(4));
    const int k = 2 + static_cast<int>(rng.below(3));
    distill::SoftTree tree(depth, dim, k);
    for (double& w : tree.filters) {
        w = rng.uniform(-1, 1);
    }
    for (double& b : tree.biases) {
        b = rng.uniform(-0.5, 0.5);
    }
    for (double& l : tree.leaf_logits) {
        l = rng.uniform(-1, 1);
    }
    tree.beta = rng.uniform(0.5, 2.0);
    const std::size_t n = 1 + rng.below(8);
    std::vector<double> states(n * static_cast<std::size_t>(dim));
    for (double& s : states) {
        s = rng.uniform(-1, 1);
    }
    std::vector<double> targets(n * static_cast<std::size_t>(k), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        if (rng.uniform() < 0.5) {
            targets[i * static_cast<std::size_t>(k) + rng.below(static_cast<std::uint64_t>(k))] = 1.0;
        } else {
            double sum = 0.0;
            for (int c = 0; c < k; ++c) {
                sum += targets[i * static_cast<std::size_t>(k) + static_cast<std::size_t>(c)] = rng.uniform(0.1, 1.0);
            }
            for (int c = 0; c < k; ++c) {
                targets[i * static_cast<std::size_t>(k) + static_cast<std::size_t>(c)] /= sum;
            }
        }
    }
    const double lambda = rng.uniform() < 0.5 ? 0.0 : rng.uniform(0.01, 1.0);
    const auto lg = distill::sdt_loss_gradient(tree, states, targets, lambda);
    std::vector<double> p = tree.pack();
    distill::SoftTree probe = tree;
    const auto loss_at = [&](const std::vector<double>& params) {
        probe.unpack(params);
        return distill::sdt_loss(probe, states, targets, lambda);
    };
    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double keep = p[i];
        p[i] = keep + h;
        const double up = loss_at(p);
        p[i] = keep - h;
        const double down = loss_at(p);
        p[i] = keep;
        worst = std::max(worst, relative_error(lg.grad[i], (up - down) / (2 * h)));
    }
    return worst;
}

// ---- CART -------------------------------------------------------------------

// Exact nonnegative rational, kept reduced.
struct Fraction {
    __int128 num = 0;
    __int128 den = 1;

    static __int128 gcd(__int128 a, __int128 b)
    {
        if (a < 0) {
            a = -a;
        }
        while (b != 0) {
            const __int128 t = a % b;
            a = b;
            b = t;
        }
        return a == 0 ? 1 : a;
    }
    Fraction reduced() const
    {
        const __int128 g = gcd(num, den);
        return {num / g, den / g};
    }
    Fraction operator+(const Fraction& o) const { return Fraction{num * o.den + o.num * den, den * o.den}.reduced(); }
    bool operator<(const Fraction& o) const { return num * o.den < o.num * den; }
    bool operator==(const Fraction& o) const { return num * o.den == o.num * den; }
};

// sum_k c_k^2 / n over a set of indices, counted from scratch.
inline Fraction purity(const distill::LabeledDataset& ds, const std::vector<std::size_t>& idx)
{
    std::vector<std::int64_t> counts(static_cast<std::size_t>(ds.action_count), 0);
    for (auto i : idx) {
        ++counts[static_cast<std::size_t>(ds.labels[i])];
    }
    __int128 sq = 0;
    for (auto c : counts) {
        sq += static_cast<__int128>(c) * c;
    }
    return Fraction{sq, static_cast<__int128>(idx.size())}.reduced();
}

struct OracleNode {
    int feature = -1;
    double threshold = 0.0;
    int prediction = 0;
    int left = -1;
    int right = -1;
};

// Exhaustive enumeration: every feature, every midpoint between consecutive
// distinct values; largest children purity wins, ties keep the first found
// (feature ascending, threshold ascending). Splits only on strict improvement.
inline int build_oracle_tree(const distill::LabeledDataset& ds, const std::vector<std::size_t>& idx, int depth,
                             int max_depth, std::vector<OracleNode>& out)
{
    std::vector<std::size_t> counts(static_cast<std::size_t>(ds.action_count), 0);
    for (auto i : idx) {
        ++counts[static_cast<std::size_t>(ds.labels[i])];
    }
    OracleNode node;
    std::size_t best_count = 0;
    for (std::size_t c = 0; c < counts.size(); ++c) {
        if (counts[c] > best_count) {
            best_count = counts[c];
            node.prediction = static_cast<int>(c);
        }
    }
    const int id = static_cast<int>(out.size());
    out.push_back(node);
    const auto classes = std::count_if(counts.begin(), counts.end(), [](auto c) { return c > 0; });
    if (classes <= 1 || depth >= max_depth) {
        return id;
    }
    const Fraction parent = purity(ds, idx);
    std::optional<Fraction> best;
    int best_f = -1;
    double best_t = 0.0;
    const auto dim = static_cast<std::size_t>(ds.state_dim);
    for (std::size_t f = 0; f < dim; ++f) {
        std::vector<double> values;
        for (auto i : idx) {
            values.push_back(ds.states[i * dim + f]);
        }
        std::sort(values.begin(), values.end());
        values.erase(std::unique(values.begin(), values.end()), values.end());
        for (std::size_t v = 0; v + 1 < values.size(); ++v) {
            const double t = values[v] + (values[v + 1] - values[v]) / 2.0;
            std::vector<std::size_t> l, r;
            for (auto i : idx) {
                (ds.states[i * dim + f] <= t ? l : r).push_back(i);
            }
            const Fraction score = purity(ds, l) + purity(ds, r);
            if (!best || *best < score) {
                best = score;
                best_f = static_cast<int>(f);
                best_t = t;
            }
        }
    }
    if (!best || !(parent < *best)) {
        return id;
    }
    std::vector<std::size_t> l, r;
    for (auto i : idx) {
        (ds.states[i * dim + static_cast<std::size_t>(best_f)] <= best_t ? l : r).push_back(i);
    }
    out[static_cast<std::size_t>(id)].feature = best_f;
    out[static_cast<std::size_t>(id)].threshold = best_t;
    const int li = build_oracle_tree(ds, l, depth + 1, max_depth, out);
    const int ri = build_oracle_tree(ds, r, depth + 1, max_depth, out);
    out[static_cast<std::size_t>(id)].left = li;
    out[static_cast<std::size_t>(id)].right = ri;
    return id;
}

// 200 points; integer-valued features on half the draws so that equal-gain
// splits and repeated values occur.
inline distill::LabeledDataset random_cart_dataset(Rng& rng)
{
    const int dim = 1 + static_cast<int>(rng.below(3));
    const int k = 2 + static_cast<int>(rng.below(2));
    const bool discrete = rng.uniform() < 0.5;
    distill::LabeledDataset ds(dim, k);
    std::vector<double> w(static_cast<std::size_t>(dim));
    for (double& v : w) {
        v = rng.uniform(-1, 1);
    }
    for (int i = 0; i < 200; ++i) {
        std::vector<double> s(static_cast<std::size_t>(dim));
        double proj = 0.0;
        for (std::size_t d = 0; d < s.size(); ++d) {
            s[d] = discrete ? static_cast<double>(rng.below(8)) : rng.uniform(-1, 1);
            proj += w[d] * s[d];
        }
        int label = proj > 0 ? 1 : 0;
        if (k == 3 && s[0] > (discrete ? 5.0 : 0.5)) {
            label = 2;
        }
        if (rng.uniform() < 0.15) {
            label = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
        }
        ds.push(s, label);
    }
    return ds;
}

// True when the library tree and the oracle tree agree node for node
// (preorder, same features, bitwise thresholds, same leaf classes).
inline bool same_tree(const distill::HardTree& t, const std::vector<OracleNode>& o)
{
    if (t.nodes.size() != o.size()) {
        return false;
    }
    for (std::size_t i = 0; i < o.size(); ++i) {
        const auto& a = t.nodes[i];
        const auto& b = o[i];
        if (a.feature != b.feature || a.prediction != b.prediction || a.left != b.left || a.right != b.right) {
            return false;
        }
        if (b.feature >= 0 && a.threshold != b.threshold) {
            return false;
        }
    }
    return true;
}

// ---- SMO --------------------------------------------------------------------

// max over alpha on [0, C] of W(alpha, alpha) for two points of opposite
// labels, by nested grid refinement.
inline double two_point_dual_by_grid(double k12, double C)
{
    const auto w = [&](double a) {
        // sum alpha - 1/2 sum alpha_i alpha_j y_i y_j k_ij with k_ii = 1
        return 2 * a - 0.5 * (a * a + a * a - 2 * a * a * k12);
    };
    double lo = 0.0, hi = C;
    double best_a = 0.0;
    for (int round = 0; round < 6; ++round) {
        const int steps = 2000;
        double best = -1e300;
        for (int i = 0; i <= steps; ++i) {
            const double a = lo + (hi - lo) * i / steps;
            if (w(a) > best) {
                best = w(a);
                best_a = a;
            }
        }
        const double span = (hi - lo) / steps;
        lo = std::max(0.0, best_a - 2 * span);
        hi = std::min(C, best_a + 2 * span);
    }
    return w(best_a);
}

struct KktReport {
    double worst_violation = 0.0;
    double equality_residual = 0.0;
};

// KKT conditions over every training point, alphas recovered from the model.
inline KktReport kkt_check(const distill::BinaryKm& m, const std::vector<double>& x, const std::vector<int>& y)
{
    const auto d = static_cast<std::size_t>(m.state_dim);
    std::vector<double> alpha(y.size(), 0.0);
    for (std::size_t s = 0; s < m.support_count(); ++s) {
        alpha[m.support_indices[s]] = std::abs(m.dual_coef[s]);
    }
    KktReport rep;
    double eq = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        eq += alpha[i] * y[i];
        const double f = m.decision(distill::StateView(x.data() + i * d, d));
        const double margin = y[i] * f;
        double v = 0.0;
        if (alpha[i] <= 0.0) {
            v = std::max(0.0, 1.0 - margin);
        } else if (alpha[i] >= m.C * (1 - 1e-12)) {
            v = std::max(0.0, margin - 1.0);
        } else {
            v = std::abs(margin - 1.0);
        }
        rep.worst_violation = std::max(rep.worst_violation, v);
    }
    rep.equality_residual = std::abs(eq);
    return rep;
}

}  // namespace oracle
