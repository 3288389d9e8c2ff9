#pragma once

// RBF kernel machines trained with SMO, combined one-vs-one for multiclass
// prediction.
//
// The binary solver works on the dual
//     min_a 0.5 a'Qa - e'a,  Q_ij = y_i y_j k(x_i, x_j),  y'a = 0,  0 <= a <= C
// using maximal-violating-pair selection with second-order information, and
// stops when the pair's gradient gap drops below tol.

#include <cmath>
#include <cstdint>
#include <list>
#include <set>
#include <unordered_map>
#include <vector>

#include "distill/common.hpp"
#include "distill/dataset.hpp"
#include "distill/env.hpp"

namespace distill {

inline double squared_distance(StateView a, StateView b)
{
    require_dim(b.size(), a.size(), "squared_distance");
    double d2 = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        d2 += d * d;
    }
    return d2;
}

inline double rbf_kernel(StateView a, StateView b, double gamma)
{
    require(gamma > 0.0, "rbf_kernel: gamma must be positive");
    return std::exp(-gamma * squared_distance(a, b));
}

struct BinaryKm {
    int state_dim = 0;
    double gamma = 1.0;
    double C = 1.0;
    // Support vectors only (alpha > 0), row-major.
    std::vector<double> support_vectors;
    // alpha_i * y_i for each support vector.
    std::vector<double> dual_coef;
    // Row of each support vector in the training data it was fitted on.
    std::vector<std::size_t> support_indices;
    double offset = 0.0;
    bool converged = true;
    std::size_t iterations = 0;

    std::size_t support_count() const { return dual_coef.size(); }

    StateView support_vector(std::size_t i) const
    {
        return {support_vectors.data() + i * static_cast<std::size_t>(state_dim), static_cast<std::size_t>(state_dim)};
    }

    // sum_i alpha_i y_i k(x_i, x) + b.
    double decision(StateView x) const
    {
        require_dim(x.size(), static_cast<std::size_t>(state_dim), "BinaryKm::decision");
        double f = offset;
        for (std::size_t i = 0; i < support_count(); ++i) {
            f += dual_coef[i] * std::exp(-gamma * squared_distance(support_vector(i), x));
        }
        return f;
    }

    // Dual objective sum(alpha) - 0.5 sum_ij alpha_i alpha_j y_i y_j k_ij.
    double dual_objective() const
    {
        double linear = 0.0;
        double quad = 0.0;
        for (std::size_t i = 0; i < support_count(); ++i) {
            linear += std::abs(dual_coef[i]);
            for (std::size_t j = 0; j < support_count(); ++j) {
                quad += dual_coef[i] * dual_coef[j] *
                        std::exp(-gamma * squared_distance(support_vector(i), support_vector(j)));
            }
        }
        return linear - 0.5 * quad;
    }
};

struct SmoOptions {
    double tol = 1e-3;
    // 0 means max(10^7, 100 n).
    std::size_t max_iterations = 0;
    // Kernel rows kept in the LRU cache.
    std::size_t cache_rows = 4096;
};

namespace detail {

class KernelRowCache {
public:
    KernelRowCache(std::span<const double> x, std::size_t dim, double gamma, std::size_t capacity)
        : x_(x), dim_(dim), n_(x.size() / dim), gamma_(gamma), capacity_(std::max<std::size_t>(2, capacity))
    {
    }

    const std::vector<double>& row(std::size_t i)
    {
        if (auto it = index_.find(i); it != index_.end()) {
            lru_.splice(lru_.begin(), lru_, it->second);
            return it->second->second;
        }
        if (lru_.size() >= capacity_) {
            index_.erase(lru_.back().first);
            lru_.pop_back();
        }
        std::vector<double> r(n_);
        const StateView xi = point(i);
        for (std::size_t j = 0; j < n_; ++j) {
            r[j] = std::exp(-gamma_ * squared_distance(xi, point(j)));
        }
        lru_.emplace_front(i, std::move(r));
        index_[i] = lru_.begin();
        return lru_.front().second;
    }

    StateView point(std::size_t i) const { return x_.subspan(i * dim_, dim_); }

private:
    std::span<const double> x_;
    std::size_t dim_;
    std::size_t n_;
    double gamma_;
    std::size_t capacity_;
    std::list<std::pair<std::size_t, std::vector<double>>> lru_;
    std::unordered_map<std::size_t, std::list<std::pair<std::size_t, std::vector<double>>>::iterator> index_;
};

}  // namespace detail

// x: n x dim row-major; y: +1 / -1 labels.
inline BinaryKm train_binary(std::span<const double> x, std::span<const int> y, int dim, double gamma, double C,
                             const SmoOptions& options = {})
{
    require(gamma > 0.0 && C > 0.0, "train_binary: gamma and C must be positive");
    require(dim >= 1, "train_binary: dim must be >= 1");
    const auto d = static_cast<std::size_t>(dim);
    const std::size_t n = y.size();
    require_dim(x.size(), n * d, "train_binary points");
    bool has_pos = false;
    bool has_neg = false;
    for (int v : y) {
        require(v == 1 || v == -1, "train_binary: labels must be +1 or -1");
        has_pos = has_pos || v == 1;
        has_neg = has_neg || v == -1;
    }
    require(has_pos && has_neg, "train_binary: both classes must be present");

    constexpr double tau = 1e-12;
    const std::size_t max_iter = options.max_iterations ? options.max_iterations : std::max<std::size_t>(10'000'000, 100 * n);
    detail::KernelRowCache cache(x, d, gamma, options.cache_rows);
    std::vector<double> alpha(n, 0.0);
    std::vector<double> grad(n, -1.0);
    const auto at_upper = [&](std::size_t t) { return alpha[t] >= C; };
    const auto at_lower = [&](std::size_t t) { return alpha[t] <= 0.0; };

    BinaryKm model;
    model.state_dim = dim;
    model.gamma = gamma;
    model.C = C;
    model.converged = false;

    std::size_t iter = 0;
    for (; iter < max_iter; ++iter) {
        // i: maximal violator in I_up.
        double g_max = -std::numeric_limits<double>::infinity();
        std::ptrdiff_t i_sel = -1;
        for (std::size_t t = 0; t < n; ++t) {
            if (y[t] == 1) {
                if (!at_upper(t) && -grad[t] > g_max) {
                    g_max = -grad[t];
                    i_sel = static_cast<std::ptrdiff_t>(t);
                }
            } else if (!at_lower(t) && grad[t] > g_max) {
                g_max = grad[t];
                i_sel = static_cast<std::ptrdiff_t>(t);
            }
        }
        if (i_sel < 0) {
            model.converged = true;
            break;
        }
        const auto i = static_cast<std::size_t>(i_sel);
        const auto& k_i = cache.row(i);

        // j: best second-order partner in I_low.
        double g_max2 = -std::numeric_limits<double>::infinity();
        double best_obj = std::numeric_limits<double>::infinity();
        std::ptrdiff_t j_sel = -1;
        for (std::size_t t = 0; t < n; ++t) {
            double grad_diff;
            double violation;
            if (y[t] == 1) {
                if (at_lower(t)) {
                    continue;
                }
                violation = grad[t];
                grad_diff = g_max + grad[t];
            } else {
                if (at_upper(t)) {
                    continue;
                }
                violation = -grad[t];
                grad_diff = g_max - grad[t];
            }
            g_max2 = std::max(g_max2, violation);
            if (grad_diff > 0.0) {
                double quad = 2.0 - 2.0 * k_i[t];
                if (quad <= 0.0) {
                    quad = tau;
                }
                const double obj = -(grad_diff * grad_diff) / quad;
                if (obj < best_obj) {
                    best_obj = obj;
                    j_sel = static_cast<std::ptrdiff_t>(t);
                }
            }
        }
        if (g_max + g_max2 < options.tol || j_sel < 0) {
            model.converged = true;
            break;
        }
        const auto j = static_cast<std::size_t>(j_sel);
        const auto& k_j = cache.row(j);

        const double old_ai = alpha[i];
        const double old_aj = alpha[j];
        const double k_ij = k_i[j];
        if (y[i] != y[j]) {
            double quad = 2.0 - 2.0 * k_ij;
            if (quad <= 0.0) {
                quad = tau;
            }
            const double delta = (-grad[i] - grad[j]) / quad;
            const double diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if (diff > 0.0) {
                if (alpha[j] < 0.0) {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if (alpha[i] < 0.0) {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if (diff > 0.0) {
                if (alpha[i] > C) {
                    alpha[i] = C;
                    alpha[j] = C - diff;
                }
            } else if (alpha[j] > C) {
                alpha[j] = C;
                alpha[i] = C + diff;
            }
        } else {
            double quad = 2.0 - 2.0 * k_ij;
            if (quad <= 0.0) {
                quad = tau;
            }
            const double delta = (grad[i] - grad[j]) / quad;
            const double sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if (sum > C) {
                if (alpha[i] > C) {
                    alpha[i] = C;
                    alpha[j] = sum - C;
                }
            } else if (alpha[j] < 0.0) {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if (sum > C) {
                if (alpha[j] > C) {
                    alpha[j] = C;
                    alpha[i] = sum - C;
                }
            } else if (alpha[i] < 0.0) {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        const double dai = alpha[i] - old_ai;
        const double daj = alpha[j] - old_aj;
        for (std::size_t t = 0; t < n; ++t) {
            grad[t] += y[t] * (y[i] * k_i[t] * dai + y[j] * k_j[t] * daj);
        }
    }
    model.iterations = iter;

    // Offset from free support vectors, or the midpoint of the feasible range.
    double ub = std::numeric_limits<double>::infinity();
    double lb = -std::numeric_limits<double>::infinity();
    double sum_free = 0.0;
    std::size_t free_count = 0;
    for (std::size_t t = 0; t < n; ++t) {
        const double yg = y[t] * grad[t];
        if (at_upper(t)) {
            if (y[t] == -1) {
                ub = std::min(ub, yg);
            } else {
                lb = std::max(lb, yg);
            }
        } else if (at_lower(t)) {
            if (y[t] == 1) {
                ub = std::min(ub, yg);
            } else {
                lb = std::max(lb, yg);
            }
        } else {
            ++free_count;
            sum_free += yg;
        }
    }
    const double rho = free_count > 0 ? sum_free / static_cast<double>(free_count) : 0.5 * (ub + lb);
    model.offset = -rho;

    for (std::size_t t = 0; t < n; ++t) {
        if (alpha[t] > 0.0) {
            const StateView p = cache.point(t);
            model.support_vectors.insert(model.support_vectors.end(), p.begin(), p.end());
            model.dual_coef.push_back(alpha[t] * y[t]);
            model.support_indices.push_back(t);
        }
    }
    return model;
}

struct MulticlassKm {
    struct Machine {
        // +1 side of the binary machine.
        int positive_class = 0;
        int negative_class = 1;
        BinaryKm km;
    };

    int state_dim = 0;
    int action_count = 0;
    double gamma = 1.0;
    double C = 1.0;
    std::size_t training_size = 0;
    StateScaler scaler;
    std::vector<Machine> machines;
};

// One binary machine per class pair (a < b), class a on the +1 side.
// Support indices are remapped to rows of ds.
inline MulticlassKm train_km(const LabeledDataset& ds, double gamma, double C, const SmoOptions& options = {},
                             const StateScaler* scaler = nullptr)
{
    require(!ds.empty(), "train_km: empty dataset");
    MulticlassKm model;
    model.state_dim = ds.state_dim;
    model.action_count = ds.action_count;
    model.gamma = gamma;
    model.C = C;
    model.training_size = ds.size();
    model.scaler = scaler ? *scaler : StateScaler::identity(static_cast<std::size_t>(ds.state_dim));
    const auto dim = static_cast<std::size_t>(ds.state_dim);
    for (int a = 0; a < ds.action_count; ++a) {
        for (int b = a + 1; b < ds.action_count; ++b) {
            std::vector<double> x;
            std::vector<int> y;
            std::vector<std::size_t> rows;
            StateVector scaled(dim);
            for (std::size_t i = 0; i < ds.size(); ++i) {
                if (ds.labels[i] != a && ds.labels[i] != b) {
                    continue;
                }
                model.scaler.apply(ds.state(i), scaled);
                x.insert(x.end(), scaled.begin(), scaled.end());
                y.push_back(ds.labels[i] == a ? 1 : -1);
                rows.push_back(i);
            }
            MulticlassKm::Machine m{a, b, train_binary(x, y, ds.state_dim, gamma, C, options)};
            for (auto& idx : m.km.support_indices) {
                idx = rows[idx];
            }
            model.machines.push_back(std::move(m));
        }
    }
    return model;
}

// Majority vote over the pairwise machines; ties go to the lowest class.
inline Action predict_km(const MulticlassKm& model, StateView state)
{
    require_dim(state.size(), static_cast<std::size_t>(model.state_dim), "predict_km");
    const StateVector x = model.scaler(state);
    std::vector<int> votes(static_cast<std::size_t>(model.action_count), 0);
    for (const auto& m : model.machines) {
        ++votes[static_cast<std::size_t>(m.km.decision(x) > 0.0 ? m.positive_class : m.negative_class)];
    }
    return static_cast<Action>(argmax(votes));
}

inline std::size_t distinct_support_count(const MulticlassKm& model)
{
    std::set<std::size_t> rows;
    for (const auto& m : model.machines) {
        rows.insert(m.km.support_indices.begin(), m.km.support_indices.end());
    }
    return rows.size();
}

inline double support_fraction(const MulticlassKm& model)
{
    if (model.training_size == 0) {
        throw InvalidInput("support_fraction: model has no training points");
    }
    return static_cast<double>(distinct_support_count(model)) / static_cast<double>(model.training_size);
}

// Stored numbers: per support vector, its coordinates and dual coefficient;
// plus one offset per machine.
inline std::size_t km_param_count(const MulticlassKm& model)
{
    std::size_t total = 0;
    for (const auto& m : model.machines) {
        total += m.km.support_count() * static_cast<std::size_t>(model.state_dim + 1) + 1;
    }
    return total;
}

inline double accuracy_percent(const MulticlassKm& model, const LabeledDataset& ds)
{
    std::size_t hits = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        hits += predict_km(model, ds.state(i)) == ds.labels[i] ? 1 : 0;
    }
    return ds.empty() ? 0.0 : 100.0 * static_cast<double>(hits) / static_cast<double>(ds.size());
}

}  // namespace distill
