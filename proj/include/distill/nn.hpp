#pragma once

// Dense feed-forward network with manual backpropagation.
//
// Parameters live in one flat vector: for each layer, the row-major weight
// matrix (out x in) followed by the bias vector. Optimizers operate on the
// flat vector, so copying a network (target sync) is a vector copy.

#include <Eigen/Dense>

#include <cmath>
#include <numeric>
#include <vector>

#include "distill/common.hpp"

namespace distill::nn {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using WeightMap = Eigen::Map<RowMatrix>;
using ConstWeightMap = Eigen::Map<const RowMatrix>;
using BiasMap = Eigen::Map<Eigen::VectorXd>;
using ConstBiasMap = Eigen::Map<const Eigen::VectorXd>;

inline std::size_t count_parameters(std::span<const int> layer_sizes)
{
    std::size_t total = 0;
    for (std::size_t l = 1; l < layer_sizes.size(); ++l) {
        const auto in = static_cast<std::size_t>(layer_sizes[l - 1]);
        const auto out = static_cast<std::size_t>(layer_sizes[l]);
        total += out * in + out;
    }
    return total;
}

// ReLU on hidden layers, identity on the output layer.
struct Mlp {
    std::vector<int> layer_sizes;
    std::vector<double> params;

    Mlp() = default;

    explicit Mlp(std::vector<int> sizes) : layer_sizes(std::move(sizes))
    {
        require(layer_sizes.size() >= 2, "Mlp: need at least an input and an output layer");
        for (int n : layer_sizes) {
            require(n >= 1, "Mlp: layer sizes must be positive");
        }
        params.assign(count_parameters(layer_sizes), 0.0);
        offsets_.clear();
        std::size_t offset = 0;
        for (std::size_t l = 1; l < layer_sizes.size(); ++l) {
            offsets_.push_back(offset);
            offset += static_cast<std::size_t>(layer_sizes[l]) * (layer_sizes[l - 1] + 1);
        }
    }

    int input_size() const { return layer_sizes.front(); }
    int output_size() const { return layer_sizes.back(); }
    // Number of weight layers.
    std::size_t depth() const { return layer_sizes.size() - 1; }
    std::size_t parameter_count() const { return params.size(); }

    std::size_t weight_offset(std::size_t layer) const { return offsets_[layer]; }
    std::size_t bias_offset(std::size_t layer) const
    {
        return offsets_[layer] + static_cast<std::size_t>(layer_sizes[layer + 1]) * layer_sizes[layer];
    }

    WeightMap weights(std::size_t layer) { return weights_in(params, layer); }
    ConstWeightMap weights(std::size_t layer) const { return cweights_in(params, layer); }
    BiasMap biases(std::size_t layer) { return biases_in(params, layer); }
    ConstBiasMap biases(std::size_t layer) const { return cbiases_in(params, layer); }

    // Views of an arbitrary buffer with this network's layout (e.g. gradients).
    WeightMap weights_in(std::span<double> buffer, std::size_t layer) const
    {
        return {buffer.data() + weight_offset(layer), layer_sizes[layer + 1], layer_sizes[layer]};
    }
    ConstWeightMap cweights_in(std::span<const double> buffer, std::size_t layer) const
    {
        return {buffer.data() + weight_offset(layer), layer_sizes[layer + 1], layer_sizes[layer]};
    }
    BiasMap biases_in(std::span<double> buffer, std::size_t layer) const
    {
        return {buffer.data() + bias_offset(layer), layer_sizes[layer + 1]};
    }
    ConstBiasMap cbiases_in(std::span<const double> buffer, std::size_t layer) const
    {
        return {buffer.data() + bias_offset(layer), layer_sizes[layer + 1]};
    }

    bool all_finite() const
    {
        return std::all_of(params.begin(), params.end(), [](double v) { return std::isfinite(v); });
    }

private:
    std::vector<std::size_t> offsets_;
};

// He-uniform weights on hidden layers, Glorot-uniform on the output layer,
// zero biases.
inline Mlp make_mlp(std::vector<int> layer_sizes, std::uint64_t seed)
{
    Mlp net(std::move(layer_sizes));
    Rng rng(seed);
    for (std::size_t l = 0; l < net.depth(); ++l) {
        const double fan_in = net.layer_sizes[l];
        const double fan_out = net.layer_sizes[l + 1];
        const bool output_layer = l + 1 == net.depth();
        const double limit = output_layer ? std::sqrt(6.0 / (fan_in + fan_out)) : std::sqrt(6.0 / fan_in);
        auto w = net.weights(l);
        for (Eigen::Index r = 0; r < w.rows(); ++r) {
            for (Eigen::Index c = 0; c < w.cols(); ++c) {
                w(r, c) = rng.uniform(-limit, limit);
            }
        }
    }
    return net;
}

// Activations of every layer for a batch; column j is sample j.
struct ForwardCache {
    std::vector<Eigen::MatrixXd> activations;

    const Eigen::MatrixXd& output() const { return activations.back(); }
};

inline ForwardCache forward_batch(const Mlp& net, const Eigen::MatrixXd& inputs)
{
    require_dim(static_cast<std::size_t>(inputs.rows()), static_cast<std::size_t>(net.input_size()),
                "forward");
    ForwardCache cache;
    cache.activations.reserve(net.depth() + 1);
    cache.activations.push_back(inputs);
    for (std::size_t l = 0; l < net.depth(); ++l) {
        Eigen::MatrixXd z = net.weights(l) * cache.activations.back();
        z.colwise() += net.biases(l);
        if (l + 1 < net.depth()) {
            z = z.cwiseMax(0.0);
        }
        cache.activations.push_back(std::move(z));
    }
    return cache;
}

inline std::vector<double> forward(const Mlp& net, StateView x)
{
    require_dim(x.size(), static_cast<std::size_t>(net.input_size()), "forward");
    Eigen::VectorXd a = Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
    for (std::size_t l = 0; l < net.depth(); ++l) {
        Eigen::VectorXd z = net.weights(l) * a + net.biases(l);
        if (l + 1 < net.depth()) {
            z = z.cwiseMax(0.0);
        }
        a = std::move(z);
    }
    return {a.data(), a.data() + a.size()};
}

// Gradient of sum_j <upstream_j, output_j> with respect to the parameters,
// summed over the batch. The result has the same layout as net.params.
inline std::vector<double> backward(const Mlp& net, const ForwardCache& cache, const Eigen::MatrixXd& upstream)
{
    require(cache.activations.size() == net.depth() + 1, "backward: cache does not match network");
    require(upstream.rows() == net.output_size() && upstream.cols() == cache.output().cols(),
            "backward: upstream gradient shape mismatch");
    std::vector<double> grads(net.parameter_count(), 0.0);
    Eigen::MatrixXd delta = upstream;
    for (std::size_t l = net.depth(); l-- > 0;) {
        const Eigen::MatrixXd& input = cache.activations[l];
        net.weights_in(grads, l).noalias() = delta * input.transpose();
        net.biases_in(grads, l) = delta.rowwise().sum();
        if (l > 0) {
            Eigen::MatrixXd prev = net.weights(l).transpose() * delta;
            // ReLU mask: the cached activation is positive exactly where the
            // pre-activation was.
            delta = prev.cwiseProduct((input.array() > 0.0).cast<double>().matrix());
        }
    }
    return grads;
}

inline std::vector<double> backward(const Mlp& net, StateView x, StateView upstream_grad)
{
    require_dim(x.size(), static_cast<std::size_t>(net.input_size()), "backward input");
    require_dim(upstream_grad.size(), static_cast<std::size_t>(net.output_size()), "backward upstream");
    Eigen::MatrixXd in = Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
    Eigen::MatrixXd up =
        Eigen::Map<const Eigen::VectorXd>(upstream_grad.data(), static_cast<Eigen::Index>(upstream_grad.size()));
    return backward(net, forward_batch(net, in), up);
}

// ---------------------------------------------------------------------------
// Optimizers over flat parameter vectors
// ---------------------------------------------------------------------------

struct AdamState {
    std::vector<double> first_moment;
    std::vector<double> second_moment;
    std::int64_t step = 0;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    AdamState() = default;
    explicit AdamState(std::size_t size, double lr = 1e-3)
        : first_moment(size, 0.0), second_moment(size, 0.0), learning_rate(lr)
    {
    }
};

inline void adam_update(std::span<double> params, std::span<const double> grads, AdamState& state)
{
    require_dim(grads.size(), params.size(), "adam_update gradients");
    require_dim(state.first_moment.size(), params.size(), "adam_update state");
    ++state.step;
    const double correction1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double correction2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        double& m = state.first_moment[i];
        double& v = state.second_moment[i];
        m = state.beta1 * m + (1.0 - state.beta1) * g;
        v = state.beta2 * v + (1.0 - state.beta2) * g * g;
        const double m_hat = m / correction1;
        const double v_hat = v / correction2;
        params[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
}

inline void adam_step(Mlp& net, std::span<const double> grads, AdamState& state)
{
    adam_update(net.params, grads, state);
}

inline void sgd_update(std::span<double> params, std::span<const double> grads, double learning_rate)
{
    require_dim(grads.size(), params.size(), "sgd_update");
    for (std::size_t i = 0; i < params.size(); ++i) {
        params[i] -= learning_rate * grads[i];
    }
}

// Rescales grads in place so that their L2 norm is at most max_norm.
inline void clip_by_norm(std::span<double> grads, double max_norm)
{
    double sq = 0.0;
    for (double g : grads) {
        sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double scale = max_norm / norm;
        for (double& g : grads) {
            g *= scale;
        }
    }
}

}  // namespace distill::nn
