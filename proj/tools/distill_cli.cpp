#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "distill/experiment.hpp"

namespace {

struct Options {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string env;
};

distill::ExperimentConfig resolve_config(const Options& o)
{
    distill::ExperimentConfig c;
    if (!o.config_path.empty()) {
        c = distill::load_config(o.config_path);
        if (!o.env.empty() && o.env != c.env) {
            throw distill::InvalidInput("--env " + o.env + " conflicts with config env " + c.env);
        }
    } else {
        c = distill::ExperimentConfig::defaults_for(o.env.empty() ? "mountaincar" : o.env);
    }
    if (const char* s = std::getenv("DISTILL_SEED"); s != nullptr && *s != '\0') {
        std::uint64_t v = 0;
        if (!distill::parse_int(std::string_view(s), v)) {
            throw distill::InvalidInput(std::string("DISTILL_SEED is not an unsigned integer: ") + s);
        }
        c.master_seed = v;
    }
    if (const char* s = std::getenv("DISTILL_OUT"); s != nullptr && *s != '\0') {
        c.output_dir = s;
    }
    if (o.seed) {
        c.master_seed = *o.seed;
    }
    if (!o.out.empty()) {
        c.output_dir = o.out;
    }
    c.validate();
    return c;
}

int run(const Options& o, distill::Stage until, bool upstream_cached_only)
{
    const auto config = resolve_config(o);
    distill::PipelineOptions popt;
    popt.until = until;
    popt.upstream_cached_only = upstream_cached_only;
    popt.log = &std::cerr;
    const auto result = distill::run_pipeline(config, popt);
    const auto out = config.output_dir;
    std::cout << "manifest: " << (out / distill::manifest_file).string() << "\n";
    if (until == distill::Stage::Report && result.ok) {
        std::cout << "metrics: " << (out / distill::metrics_file).string() << " (" << result.reports.size()
                  << " rows)\n";
    }
    if (!result.ok) {
        for (const auto& s : result.manifest.stages) {
            if (s.status != "done") {
                std::cerr << "stage " << s.name << " " << s.status << ": " << s.error << "\n";
            }
        }
        return 1;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Policy distillation workbench: DQN experts, tree and kernel students, fidelity metrics."};
    app.require_subcommand(1);
    Options opts;

    struct Command {
        const char* name;
        const char* help;
        distill::Stage until;
        bool cached_only;
    };
    const Command commands[] = {
        {"train-expert", "Train the DQN expert", distill::Stage::Expert, false},
        {"distill", "Collect and balance the expert-labelled dataset", distill::Stage::Dataset, false},
        {"train-students", "Train the HDT, SDT and KM students", distill::Stage::Students, false},
        {"evaluate", "Evaluate expert and students", distill::Stage::Evaluate, false},
        {"report", "Write metrics.csv and plot data from an existing evaluation", distill::Stage::Report, true},
        {"run", "Run the full pipeline", distill::Stage::Report, false},
    };
    int exit_code = 0;
    for (const auto& cmd : commands) {
        auto* sub = app.add_subcommand(cmd.name, cmd.help);
        sub->add_option("--config", opts.config_path, "Experiment config (JSON)")->check(CLI::ExistingFile);
        sub->add_option("--seed", opts.seed, "Master seed");
        sub->add_option("--out", opts.out, "Output directory");
        sub->add_option("--env", opts.env, "Environment")->check(CLI::IsMember({"mountaincar", "cartpole"}));
        sub->callback([&opts, &exit_code, cmd] {
            try {
                exit_code = run(opts, cmd.until, cmd.cached_only);
            } catch (const std::exception& e) {
                std::cerr << "error: " << e.what() << "\n";
                exit_code = 2;
            }
        });
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    return exit_code;
}
