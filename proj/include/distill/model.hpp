#pragma once

// Closed set of trained model kinds and their Controller adapters.

#include <memory>
#include <string>
#include <variant>

#include "distill/dqn.hpp"
#include "distill/hdt.hpp"
#include "distill/km.hpp"
#include "distill/metrics.hpp"
#include "distill/sdt.hpp"

namespace distill {

using Model = std::variant<QPolicy, HardTree, SoftTree, MulticlassKm>;

inline std::string model_kind(const Model& m)
{
    struct V {
        std::string operator()(const QPolicy&) const { return "mlp"; }
        std::string operator()(const HardTree&) const { return "hdt"; }
        std::string operator()(const SoftTree&) const { return "sdt"; }
        std::string operator()(const MulticlassKm&) const { return "km"; }
    };
    return std::visit(V{}, m);
}

inline std::size_t model_param_count(const Model& m)
{
    struct V {
        std::size_t operator()(const QPolicy& p) const { return p.parameter_count(); }
        std::size_t operator()(const HardTree& t) const { return hdt_param_count(t); }
        std::size_t operator()(const SoftTree& t) const { return sdt_param_count(t); }
        std::size_t operator()(const MulticlassKm& k) const { return km_param_count(k); }
    };
    return std::visit(V{}, m);
}

inline int model_state_dim(const Model& m)
{
    struct V {
        int operator()(const QPolicy& p) const { return p.net.input_size(); }
        int operator()(const HardTree& t) const { return t.state_dim; }
        int operator()(const SoftTree& t) const { return t.state_dim; }
        int operator()(const MulticlassKm& k) const { return k.state_dim; }
    };
    return std::visit(V{}, m);
}

inline int model_action_count(const Model& m)
{
    struct V {
        int operator()(const QPolicy& p) const { return p.action_count; }
        int operator()(const HardTree& t) const { return t.action_count; }
        int operator()(const SoftTree& t) const { return t.action_count; }
        int operator()(const MulticlassKm& k) const { return k.action_count; }
    };
    return std::visit(V{}, m);
}

// Tree depth for trees, parameter count otherwise.
inline int model_depth_or_params(const Model& m)
{
    if (const auto* t = std::get_if<HardTree>(&m)) {
        return t->max_depth;
    }
    if (const auto* t = std::get_if<SoftTree>(&m)) {
        return t->depth;
    }
    return static_cast<int>(model_param_count(m));
}

inline Action model_predict(const Model& m, StateView s)
{
    struct V {
        StateView s;
        Action operator()(const QPolicy& p) const { return greedy_action(p, s); }
        Action operator()(const HardTree& t) const { return predict_hdt(t, s); }
        Action operator()(const SoftTree& t) const { return predict_sdt(t, s); }
        Action operator()(const MulticlassKm& k) const { return predict_km(k, s); }
    };
    return std::visit(V{s}, m);
}

inline Controller make_controller(std::shared_ptr<const Model> model, std::string label)
{
    require(model != nullptr, "make_controller: null model");
    Controller c;
    c.label = std::move(label);
    c.kind = model_kind(*model);
    c.depth_or_params = model_depth_or_params(*model);
    c.param_count = model_param_count(*model);
    c.act = [model](StateView s) { return model_predict(*model, s); };
    return c;
}

inline Controller make_controller(Model model, std::string label)
{
    return make_controller(std::make_shared<const Model>(std::move(model)), std::move(label));
}

}  // namespace distill
