// Acceptance run: trains both experts, sweeps students, checks the gated
// properties and prints one PASS/FAIL line per criterion.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "distill/distill.hpp"
#include "oracles.hpp"

using namespace distill;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0)
{
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct RunInfo {
    ExperimentConfig config;
    PipelineResult result;
    double seconds = 0.0;
};

RunInfo run_config(const std::string& name, const fs::path& out)
{
    RunInfo info;
    info.config = load_config(fs::path(DISTILL_SOURCE_DIR) / "configs" / name);
    info.config.output_dir = out;
    fs::remove_all(out);
    const auto t0 = Clock::now();
    info.result = run_pipeline(info.config);
    info.seconds = seconds_since(t0);
    if (!info.result.ok) {
        for (const auto& s : info.result.manifest.stages) {
            if (s.status != "done") {
                std::cerr << name << ": stage " << s.name << " " << s.status << ": " << s.error << "\n";
            }
        }
    }
    return info;
}

const MetricsReport* find_row(const std::vector<MetricsReport>& rows, const std::string& label)
{
    for (const auto& r : rows) {
        if (r.label == label) {
            return &r;
        }
    }
    return nullptr;
}

std::string fmt(double v)
{
    std::ostringstream ss;
    ss << v;
    return ss.str();
}

Outcome expert_mc(const RunInfo& run)
{
    if (!run.result.ok) {
        return {false, "pipeline failed"};
    }
    const MountainCar env;
    const Controller expert = load_model(run.config.output_dir / "expert.model", &env.spec());
    const std::uint64_t base = stage_seeds(run.config).eval;
    int goals = 0;
    std::vector<double> rewards;
    for (std::uint64_t j = 0; j < 100; ++j) {
        const auto trace = rollout(env, expert, env.reset(derive_seed(base, j)));
        goals += trace.done_reason == DoneReason::Goal ? 1 : 0;
        rewards.push_back(trace.total_reward);
    }
    const auto ci = mean_ci95(rewards);
    const bool ok = goals >= 95 && ci.mean >= -200.0 && ci.mean <= -100.0;
    return {ok, "goals " + std::to_string(goals) + "/100, mean " + fmt(ci.mean) + " +- " + fmt(ci.ci95_half_width) +
                    ", pipeline " + fmt(run.seconds) + " s"};
}

Outcome expert_cp(const RunInfo& run)
{
    if (!run.result.ok) {
        return {false, "pipeline failed"};
    }
    const auto* e = find_row(run.result.reports, "expert");
    if (e == nullptr) {
        return {false, "no expert row"};
    }
    const bool ok = e->mean_reward == 200.0 && e->ci95_half_width == 0.0 && e->n_eval_episodes == 100;
    return {ok, "mean " + fmt(e->mean_reward) + " +- " + fmt(e->ci95_half_width) + " over " +
                    std::to_string(e->n_eval_episodes) + " episodes, pipeline " + fmt(run.seconds) + " s"};
}

Outcome param_counts()
{
    HardTree three;
    three.nodes.resize(7);
    for (std::size_t i : {0u, 1u, 2u}) {
        three.nodes[i].feature = 0;
    }
    const auto mlp = nn::count_parameters(std::vector<int>{2, 24, 48, 3});
    const auto s5 = sdt_param_count(5, 2, 3);
    const auto s3 = sdt_param_count(3, 4, 2);
    const auto h = hdt_param_count(three);
    const bool ok = mlp == 1419 && s5 == 190 && s3 == 52 && h == 6;
    return {ok, "mlp " + std::to_string(mlp) + ", sdt(5,2,3) " + std::to_string(s5) + ", sdt(3,4,2) " +
                    std::to_string(s3) + ", hdt(3 inner) " + std::to_string(h)};
}

Outcome mc_sweep(const RunInfo& run)
{
    if (!run.result.ok) {
        return {false, "pipeline failed"};
    }
    const auto& rows = run.result.reports;
    const auto* e = find_row(rows, "expert");
    if (e == nullptr) {
        return {false, "no expert row"};
    }
    const double lo = e->mean_reward - e->ci95_half_width;
    std::string hdt_hits, sdt_hits;
    for (int d = 7; d <= 9; ++d) {
        const auto* r = find_row(rows, "hdt_d" + std::to_string(d));
        if (r != nullptr && r->mean_reward >= lo) {
            hdt_hits += " d" + std::to_string(d) + "=" + fmt(r->mean_reward);
        }
    }
    for (int d = 2; d <= 9; ++d) {
        const auto* r = find_row(rows, "sdt_d" + std::to_string(d));
        if (r != nullptr && std::abs(r->mean_reward - e->mean_reward) <= r->ci95_half_width + e->ci95_half_width) {
            sdt_hits += " d" + std::to_string(d) + "=" + fmt(r->mean_reward);
        }
    }
    return {!hdt_hits.empty() && !sdt_hits.empty(), "expert " + fmt(e->mean_reward) + " +- " +
                                                     fmt(e->ci95_half_width) + "; hdt:" +
                                                     (hdt_hits.empty() ? " none" : hdt_hits) + "; sdt:" +
                                                     (sdt_hits.empty() ? " none" : sdt_hits)};
}

Outcome cp_sweep(const RunInfo& run)
{
    if (!run.result.ok) {
        return {false, "pipeline failed"};
    }
    int perfect = 0;
    int present = 0;
    std::string list;
    for (int d = 2; d <= 9; ++d) {
        const auto* r = find_row(run.result.reports, "hdt_d" + std::to_string(d));
        if (r == nullptr) {
            continue;
        }
        ++present;
        perfect += r->mean_reward == 200.0 ? 1 : 0;
        list += " d" + std::to_string(d) + "=" + fmt(r->mean_reward);
    }
    return {present == 8 && perfect >= 5, std::to_string(perfect) + "/8 depths at 200:" + list};
}

Outcome metric_identities()
{
    const auto make = [](std::vector<double> v) {
        EvfTable t;
        for (std::size_t i = 0; i < v.size(); ++i) {
            t.seed_states.push_back({static_cast<double>(i)});
        }
        t.returns = std::move(v);
        return t;
    };
    const MountainCar env;
    const auto grid = grid_states(env.spec(), 20);
    const Controller noop{"noop", "hdt", 1, 0, [](StateView) { return 1; }};
    const Controller bang{"bang", "hdt", 1, 2, [](StateView s) { return s[1] >= 0 ? 2 : 0; }};
    const auto evf = estimate_evf(env, noop, grid, 1.0, 200);
    int off = 0;
    for (double r : evf.returns) {
        off += r == -200.0 ? 0 : 1;
    }
    const bool all_minus_200 = evf.returns.size() == 400 && off == 0;
    const auto bang_evf = estimate_evf(env, bang, grid, 1.0, 200);
    const double self = nrmse(bang_evf, bang_evf);
    const double acc = policy_accuracy(bang, bang, grid_states(env.spec(), 100));
    const double hand = nrmse(make({1, 2}), make({3, 2}));
    const bool ok = self == 0.0 && acc == 100.0 && all_minus_200 && std::abs(hand - 0.471405) <= 1e-6;
    return {ok, "nrmse(V,V) " + fmt(self) + ", acc(pi,pi) " + fmt(acc) + ", do-nothing EVF != -200 at " +
                    std::to_string(off) + "/400 grid points, hand example " + fmt(hand)};
}

Outcome oracle_equivalences()
{
    Rng rng(20240);
    int cart_ok = 0;
    for (int t = 0; t < 50; ++t) {
        const auto ds = oracle::random_cart_dataset(rng);
        const int depth = 1 + t % 3;
        std::vector<std::size_t> idx(ds.size());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            idx[i] = i;
        }
        std::vector<oracle::OracleNode> want;
        oracle::build_oracle_tree(ds, idx, 0, depth, want);
        cart_ok += oracle::same_tree(train_hdt(ds, depth), want) ? 1 : 0;
    }
    double worst_dual = 0.0;
    for (int t = 0; t < 50; ++t) {
        const std::vector<double> x{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
        const std::vector<int> y{1, -1};
        const double gamma = rng.uniform(0.1, 5.0);
        const double C = rng.uniform(0.05, 10.0);
        const auto m = train_binary(x, y, 2, gamma, C);
        const double k12 = rbf_kernel(std::span(x).subspan(0, 2), std::span(x).subspan(2, 2), gamma);
        worst_dual = std::max(worst_dual, std::abs(m.dual_objective() - oracle::two_point_dual_by_grid(k12, C)));
    }
    double worst_kkt = 0.0;
    for (int t = 0; t < 20; ++t) {
        std::vector<double> x;
        std::vector<int> y;
        for (int i = 0; i < 40; ++i) {
            const double a = rng.uniform(-1, 1);
            const double b = rng.uniform(-1, 1);
            x.push_back(a);
            x.push_back(b);
            int label = a * a + b > 0.2 ? 1 : -1;
            if (rng.uniform() < 0.1 || i < 2) {
                label = i < 2 ? (i == 0 ? 1 : -1) : -label;
            }
            y.push_back(label);
        }
        const double gammas[] = {0.1, 1.0, 5.0};
        const double cs[] = {0.1, 1.0, 10.0};
        const auto m = train_binary(x, y, 2, gammas[rng.below(3)], cs[rng.below(3)]);
        const auto r = oracle::kkt_check(m, x, y);
        worst_kkt = std::max({worst_kkt, r.worst_violation, r.equality_residual});
    }
    double worst_mlp = 0.0;
    double worst_sdt = 0.0;
    for (int t = 0; t < 100; ++t) {
        worst_mlp = std::max(worst_mlp, oracle::mlp_gradient_error(rng));
        worst_sdt = std::max(worst_sdt, oracle::sdt_gradient_error(rng));
    }
    const bool ok = cart_ok == 50 && worst_dual <= 1e-6 && worst_kkt <= 1e-3 && worst_mlp < 1e-4 && worst_sdt < 1e-4;
    return {ok, "cart " + std::to_string(cart_ok) + "/50, smo dual gap " + fmt(worst_dual) + ", kkt " +
                    fmt(worst_kkt) + ", fd mlp " + fmt(worst_mlp) + ", fd sdt " + fmt(worst_sdt)};
}

Outcome km_trend(const RunInfo& run)
{
    if (!run.result.ok) {
        return {false, "pipeline failed"};
    }
    const MountainCar env;
    const auto train =
        dataset_from_csv(read_text_file(run.config.output_dir / "dataset" / "train.dataset.csv"), 3);
    const auto scaler = StateScaler::from_spec(env.spec());
    const double cs[] = {0.1, 1.0, 10.0};
    double mean[3] = {0, 0, 0};
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto sub = subsample(train, 2000, derive_seed(99, s));
        for (int c = 0; c < 3; ++c) {
            mean[c] += support_fraction(train_km(sub, 1.0, cs[c], {}, &scaler)) / 5.0;
        }
    }
    const auto counts = train.class_counts();
    const bool balanced = counts[0] == counts[1] && counts[1] == counts[2];
    const bool ok = mean[0] >= mean[1] && mean[1] >= mean[2];
    return {ok, std::string(balanced ? "balanced" : "unbalanced") + " train split, gamma 1: C=0.1 " + fmt(mean[0]) +
                    ", C=1 " + fmt(mean[1]) + ", C=10 " + fmt(mean[2])};
}

Outcome determinism(const RunInfo& a, const RunInfo& b)
{
    if (!a.result.ok || !b.result.ok) {
        return {false, "pipeline failed"};
    }
    const auto x = read_text_file(a.config.output_dir / metrics_file);
    const auto y = read_text_file(b.config.output_dir / metrics_file);
    return {x == y, std::to_string(x.size()) + " bytes, " + (x == y ? "identical" : "different")};
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Acceptance checks"};
    std::string work = "acceptance_runs";
    app.add_option("--work", work, "Scratch directory for pipeline runs");
    CLI11_PARSE(app, argc, argv);
    const fs::path root(work);
    fs::create_directories(root);

    int failures = 0;
    const auto report = [&](int id, const std::string& name, const Outcome& o) {
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << name << "): " << o.detail
                  << std::endl;
        failures += o.pass ? 0 : 1;
    };

    const auto mc = run_config("mountaincar.json", root / "mountaincar_a");
    report(1, "mountaincar expert", expert_mc(mc));
    const auto cp = run_config("cartpole.json", root / "cartpole");
    report(2, "cartpole expert", expert_cp(cp));
    report(3, "parameter counts", param_counts());
    report(4, "mountaincar student sweep", mc_sweep(mc));
    report(5, "cartpole hdt sweep", cp_sweep(cp));
    report(6, "metric identities", metric_identities());
    report(7, "oracle equivalences", oracle_equivalences());
    report(8, "km support fraction trend", km_trend(mc));
    const auto mc2 = run_config("mountaincar.json", root / "mountaincar_b");
    report(9, "determinism", determinism(mc, mc2));

    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
    return failures == 0 ? 0 : 1;
}
