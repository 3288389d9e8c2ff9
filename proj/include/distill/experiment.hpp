#pragma once

// Configuration-driven pipeline: expert -> dataset -> students -> evaluate ->
// report. Every stage writes its artifacts under the output directory and is
// skipped on rerun when the manifest holds a matching stage hash and all of
// its files still exist.
//
// Stage seeds fan out from the master seed as derive_seed(master, name) with
// name in {"expert", "dataset", "students", "eval"}; student i additionally uses
// derive_seed(students_seed, label).

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "distill/common.hpp"
#include "distill/dataset.hpp"
#include "distill/dqn.hpp"
#include "distill/env.hpp"
#include "distill/hdt.hpp"
#include "distill/km.hpp"
#include "distill/metrics.hpp"
#include "distill/model.hpp"
#include "distill/persistence.hpp"
#include "distill/sdt.hpp"

namespace distill {

inline constexpr std::string_view library_version = "1.0.0";

using Json = nlohmann::json;
namespace fs = std::filesystem;

// ---- configuration -----------------------------------------------------------

struct DatasetConfig {
    int episodes = 1500;
    bool balance = true;
    double split_ratio = 0.9;
    // Defaults to derive_seed(master, "dataset").
    std::optional<std::uint64_t> seed;
};

struct KmSweep {
    std::vector<double> gammas;
    std::vector<double> Cs;
    // Stratified subsample of the training split; 0 keeps everything.
    std::size_t max_points = 2000;
    double tolerance = 1e-3;
    std::size_t cache_rows = 4096;

    std::size_t size() const { return gammas.size() * Cs.size(); }
};

struct StudentSweep {
    std::vector<int> hdt_depths;
    std::vector<int> sdt_depths;
    SdtConfig sdt;
    KmSweep km;
};

struct EvalSettings {
    int evf_steps = 20;
    int accuracy_steps = 100;
    int episodes = 100;
    double gamma_eval = 1.0;
    NrmseNormalization normalize_by = NrmseNormalization::Student;
};

struct ExperimentConfig {
    std::string env = "mountaincar";
    std::uint64_t master_seed = 1;
    fs::path output_dir = "runs/mountaincar";
    std::size_t workers = 1;
    DqnConfig expert;
    DatasetConfig dataset;
    StudentSweep students;
    EvalSettings eval;

    static ExperimentConfig defaults_for(const std::string& env_name)
    {
        ExperimentConfig c;
        c.env = env_name;
        c.output_dir = fs::path("runs") / env_name;
        c.expert.target_success = 1.0;
        c.expert.eval_episodes = 100;
        if (env_name == "mountaincar") {
            c.master_seed = 6;
            c.expert.hidden_layers = {24, 48};
            c.expert.episodes = 1500;
            c.dataset.episodes = 1500;
            c.eval.evf_steps = 20;
            c.eval.accuracy_steps = 100;
        } else if (env_name == "cartpole") {
            c.master_seed = 3;
            c.expert.hidden_layers = {128, 128, 128};
            c.expert.episodes = 1000;
            c.dataset.episodes = 750;
            c.eval.evf_steps = 5;
            c.eval.accuracy_steps = 10;
        } else {
            throw InvalidInput("unknown env '" + env_name + "' (expected mountaincar or cartpole)");
        }
        return c;
    }

    void validate() const
    {
        require(env == "mountaincar" || env == "cartpole", "config: env must be mountaincar or cartpole");
        expert.validate();
        students.sdt.validate();
        require(dataset.episodes >= 1, "config: dataset.episodes must be >= 1");
        require(dataset.split_ratio > 0.0 && dataset.split_ratio < 1.0, "config: dataset.split_ratio must be in (0, 1)");
        for (int d : students.hdt_depths) {
            require(d >= 1, "config: HDT depths must be >= 1");
        }
        for (int d : students.sdt_depths) {
            require(d >= 1 && d <= 12, "config: SDT depths must be in [1, 12]");
        }
        require(students.km.gammas.empty() == students.km.Cs.empty(),
                "config: KM gamma and C grids must both be empty or both nonempty");
        for (double g : students.km.gammas) {
            require(g > 0.0, "config: KM gammas must be positive");
        }
        for (double c : students.km.Cs) {
            require(c > 0.0, "config: KM C values must be positive");
        }
        require(students.km.tolerance > 0.0, "config: KM tolerance must be positive");
        require(eval.evf_steps >= 1 && eval.accuracy_steps >= 1, "config: grid sizes must be >= 1");
        require(eval.episodes >= 2, "config: eval.episodes must be >= 2");
        require(eval.gamma_eval > 0.0 && eval.gamma_eval <= 1.0, "config: eval.gamma_eval must be in (0, 1]");
        require(workers >= 1, "config: workers must be >= 1");
    }
};

namespace detail {

// Reads known keys from one JSON object and rejects the rest.
class Fields {
public:
    Fields(const Json& j, std::string path) : j_(j), path_(std::move(path))
    {
        if (!j_.is_object()) {
            throw InvalidInput("config: " + path_ + " must be an object");
        }
    }

    template <typename T>
    void get(const char* key, T& out)
    {
        if (!j_.contains(key)) {
            return;
        }
        seen_.push_back(key);
        try {
            if constexpr (std::is_same_v<T, std::optional<double>> || std::is_same_v<T, std::optional<std::uint64_t>>) {
                if (j_.at(key).is_null()) {
                    out.reset();
                } else {
                    out = j_.at(key).get<typename T::value_type>();
                }
            } else {
                if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
                    if (!j_.at(key).is_number_integer()) {
                        throw InvalidInput("expected an integer");
                    }
                }
                out = j_.at(key).get<T>();
            }
        } catch (const std::exception& e) {
            throw InvalidInput("config: " + path_ + "." + key + ": " + e.what());
        }
    }

    const Json* child(const char* key)
    {
        if (!j_.contains(key)) {
            return nullptr;
        }
        seen_.push_back(key);
        return &j_.at(key);
    }

    template <typename E>
    void get_enum(const char* key, E& out, std::initializer_list<std::pair<const char*, E>> names)
    {
        std::string s;
        const bool present = j_.contains(key);
        get(key, s);
        if (!present) {
            return;
        }
        for (const auto& [n, v] : names) {
            if (s == n) {
                out = v;
                return;
            }
        }
        throw InvalidInput("config: " + path_ + "." + key + ": unknown value '" + s + "'");
    }

    void finish() const
    {
        for (const auto& item : j_.items()) {
            if (std::find(seen_.begin(), seen_.end(), item.key()) == seen_.end()) {
                throw InvalidInput("config: unknown key " + path_ + "." + item.key());
            }
        }
    }

private:
    const Json& j_;
    std::string path_;
    std::vector<std::string> seen_;
};

inline const char* optimizer_name(SdtOptimizer o) { return o == SdtOptimizer::Adam ? "adam" : "sgd"; }
inline const char* routing_name(SdtRouting r) { return r == SdtRouting::Hard ? "hard" : "expectation"; }
inline const char* normalization_name(NrmseNormalization n)
{
    return n == NrmseNormalization::Student ? "student" : "expert";
}

}  // namespace detail

// Defaults for the named env, overridden by whatever keys are present.
inline ExperimentConfig config_from_json(const Json& j)
{
    detail::Fields top(j, "config");
    std::string env = "mountaincar";
    top.get("env", env);
    ExperimentConfig c = ExperimentConfig::defaults_for(env);
    top.get("master_seed", c.master_seed);
    std::string out = c.output_dir.string();
    top.get("output_dir", out);
    c.output_dir = out;
    top.get("workers", c.workers);

    if (const Json* e = top.child("expert")) {
        detail::Fields f(*e, "expert");
        f.get("hidden_layers", c.expert.hidden_layers);
        f.get("gamma", c.expert.gamma);
        f.get("episodes", c.expert.episodes);
        f.get("epsilon_start", c.expert.epsilon_start);
        f.get("epsilon_end", c.expert.epsilon_end);
        f.get("epsilon_decay", c.expert.epsilon_decay);
        f.get("batch_size", c.expert.batch_size);
        f.get("replay_capacity", c.expert.replay_capacity);
        f.get("warmup", c.expert.warmup);
        f.get("target_sync_interval", c.expert.target_sync_interval);
        f.get("train_every", c.expert.train_every);
        f.get("learning_rate", c.expert.learning_rate);
        f.get("grad_clip", c.expert.grad_clip);
        f.get("eval_interval", c.expert.eval_interval);
        f.get("eval_episodes", c.expert.eval_episodes);
        f.get("target_success", c.expert.target_success);
        f.get("scale_inputs", c.expert.scale_inputs);
        f.finish();
    }
    if (const Json* d = top.child("dataset")) {
        detail::Fields f(*d, "dataset");
        f.get("episodes", c.dataset.episodes);
        f.get("balance", c.dataset.balance);
        f.get("split_ratio", c.dataset.split_ratio);
        f.get("seed", c.dataset.seed);
        f.finish();
    }
    if (const Json* s = top.child("students")) {
        detail::Fields f(*s, "students");
        f.get("hdt_depths", c.students.hdt_depths);
        f.get("sdt_depths", c.students.sdt_depths);
        if (const Json* t = f.child("sdt")) {
            detail::Fields g(*t, "students.sdt");
            auto& sc = c.students.sdt;
            g.get("beta0", sc.beta0);
            g.get("learning_rate", sc.learning_rate);
            g.get("batch_size", sc.batch_size);
            g.get("epochs", sc.epochs);
            g.get("lambda", sc.lambda);
            g.get("init_scale", sc.init_scale);
            g.get_enum("optimizer", sc.optimizer, {{"adam", SdtOptimizer::Adam}, {"sgd", SdtOptimizer::Sgd}});
            g.get_enum("routing", sc.routing, {{"hard", SdtRouting::Hard}, {"expectation", SdtRouting::Expectation}});
            g.get("scale_inputs", sc.scale_inputs);
            g.finish();
        }
        if (const Json* k = f.child("km")) {
            detail::Fields g(*k, "students.km");
            g.get("gammas", c.students.km.gammas);
            g.get("C", c.students.km.Cs);
            g.get("max_points", c.students.km.max_points);
            g.get("tolerance", c.students.km.tolerance);
            g.get("cache_rows", c.students.km.cache_rows);
            g.finish();
        }
        f.finish();
    }
    if (const Json* e = top.child("eval")) {
        detail::Fields f(*e, "eval");
        f.get("evf_steps", c.eval.evf_steps);
        f.get("accuracy_steps", c.eval.accuracy_steps);
        f.get("episodes", c.eval.episodes);
        f.get("gamma_eval", c.eval.gamma_eval);
        f.get_enum("normalize_by", c.eval.normalize_by,
                   {{"student", NrmseNormalization::Student}, {"expert", NrmseNormalization::Expert}});
        f.finish();
    }
    top.finish();
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const fs::path& path)
{
    Json j;
    try {
        j = Json::parse(read_text_file(path));
    } catch (const Json::parse_error& e) {
        throw InvalidInput(path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

inline Json expert_json(const DqnConfig& e)
{
    return {{"hidden_layers", e.hidden_layers},
            {"gamma", e.gamma},
            {"episodes", e.episodes},
            {"epsilon_start", e.epsilon_start},
            {"epsilon_end", e.epsilon_end},
            {"epsilon_decay", e.epsilon_decay},
            {"batch_size", e.batch_size},
            {"replay_capacity", e.replay_capacity},
            {"warmup", e.warmup},
            {"target_sync_interval", e.target_sync_interval},
            {"train_every", e.train_every},
            {"learning_rate", e.learning_rate},
            {"grad_clip", e.grad_clip},
            {"eval_interval", e.eval_interval},
            {"eval_episodes", e.eval_episodes},
            {"target_success", e.target_success ? Json(*e.target_success) : Json(nullptr)},
            {"scale_inputs", e.scale_inputs}};
}

inline Json config_to_json(const ExperimentConfig& c)
{
    const auto& s = c.students.sdt;
    return {{"env", c.env},
            {"master_seed", c.master_seed},
            {"output_dir", c.output_dir.string()},
            {"workers", c.workers},
            {"expert", expert_json(c.expert)},
            {"dataset",
             {{"episodes", c.dataset.episodes},
              {"balance", c.dataset.balance},
              {"split_ratio", c.dataset.split_ratio},
              {"seed", c.dataset.seed ? Json(*c.dataset.seed) : Json(nullptr)}}},
            {"students",
             {{"hdt_depths", c.students.hdt_depths},
              {"sdt_depths", c.students.sdt_depths},
              {"sdt",
               {{"beta0", s.beta0},
                {"learning_rate", s.learning_rate},
                {"batch_size", s.batch_size},
                {"epochs", s.epochs},
                {"lambda", s.lambda},
                {"init_scale", s.init_scale},
                {"optimizer", detail::optimizer_name(s.optimizer)},
                {"routing", detail::routing_name(s.routing)},
                {"scale_inputs", s.scale_inputs}}},
              {"km",
               {{"gammas", c.students.km.gammas},
                {"C", c.students.km.Cs},
                {"max_points", c.students.km.max_points},
                {"tolerance", c.students.km.tolerance},
                {"cache_rows", c.students.km.cache_rows}}}}},
            {"eval",
             {{"evf_steps", c.eval.evf_steps},
              {"accuracy_steps", c.eval.accuracy_steps},
              {"episodes", c.eval.episodes},
              {"gamma_eval", c.eval.gamma_eval},
              {"normalize_by", detail::normalization_name(c.eval.normalize_by)}}}};
}

inline std::string hash_hex(std::uint64_t h)
{
    std::ostringstream ss;
    ss << std::hex << std::setw(16) << std::setfill('0') << h;
    return ss.str();
}

// Output location and worker count do not affect results and are left out.
inline std::string config_hash(const ExperimentConfig& c)
{
    Json j = config_to_json(c);
    j.erase("output_dir");
    j.erase("workers");
    return hash_hex(fnv1a(j.dump()));
}

struct StageSeeds {
    std::uint64_t expert = 0;
    std::uint64_t dataset = 0;
    std::uint64_t students = 0;
    std::uint64_t eval = 0;
};

inline StageSeeds stage_seeds(const ExperimentConfig& c)
{
    return {derive_seed(c.master_seed, "expert"), c.dataset.seed.value_or(derive_seed(c.master_seed, "dataset")),
            derive_seed(c.master_seed, "students"), derive_seed(c.master_seed, "eval")};
}

// ---- environments -------------------------------------------------------------

using AnyEnv = std::variant<MountainCar, CartPole>;

inline AnyEnv make_env(const std::string& name)
{
    if (name == "mountaincar") {
        return MountainCar{};
    }
    if (name == "cartpole") {
        return CartPole{};
    }
    throw InvalidInput("unknown env '" + name + "'");
}

inline const EnvSpec& env_spec(const AnyEnv& env)
{
    return std::visit([](const auto& e) -> const EnvSpec& { return e.spec(); }, env);
}

inline EvalConfig eval_config_for(const ExperimentConfig& c, const EnvSpec& spec)
{
    EvalConfig e = EvalConfig::defaults_for(spec);
    e.evf_steps = c.eval.evf_steps;
    e.accuracy_steps = c.eval.accuracy_steps;
    e.episodes = c.eval.episodes;
    e.gamma_eval = c.eval.gamma_eval;
    e.normalize_by = c.eval.normalize_by;
    e.base_seed = stage_seeds(c).eval;
    e.workers = c.workers;
    return e;
}

// ---- models on disk ----------------------------------------------------------

// Label is the file name up to the first dot.
inline Controller load_model(const fs::path& path, const EnvSpec* expected = nullptr)
{
    ModelFile file = read_model_file(path);
    if (expected != nullptr) {
        validate_model_for(file.model, *expected);
    }
    const std::string name = path.filename().string();
    return make_controller(std::move(file.model), name.substr(0, name.find('.')));
}

// ---- manifest ----------------------------------------------------------------

struct StageRecord {
    std::string name;
    std::string hash;
    std::uint64_t seed = 0;
    // "done", "failed" or "partial".
    std::string status;
    std::string started_at;
    std::string finished_at;
    std::vector<std::string> artifacts;
    Json info = Json::object();
    std::string error;
};

struct RunManifest {
    std::string config_hash;
    Json config;
    std::vector<StageRecord> stages;
    bool complete = false;

    const StageRecord* find(const std::string& name) const
    {
        for (const auto& s : stages) {
            if (s.name == name) {
                return &s;
            }
        }
        return nullptr;
    }

    std::vector<std::string> artifacts() const
    {
        std::vector<std::string> out;
        for (const auto& s : stages) {
            out.insert(out.end(), s.artifacts.begin(), s.artifacts.end());
        }
        return out;
    }
};

inline constexpr std::string_view manifest_file = "run.manifest";

inline Json manifest_to_json(const RunManifest& m)
{
    Json stages = Json::array();
    for (const auto& s : m.stages) {
        Json j{{"name", s.name},     {"hash", s.hash},           {"seed", s.seed},
               {"status", s.status}, {"started_at", s.started_at}, {"finished_at", s.finished_at},
               {"artifacts", s.artifacts}, {"info", s.info}};
        if (!s.error.empty()) {
            j["error"] = s.error;
        }
        stages.push_back(std::move(j));
    }
    return {{"config_hash", m.config_hash},
            {"config", m.config},
            {"complete", m.complete},
            {"versions", {{"distill", library_version}, {"model_format", model_format_version}}},
            {"artifacts", m.artifacts()},
            {"stages", stages}};
}

inline std::optional<RunManifest> read_manifest(const fs::path& out_dir)
{
    const auto path = out_dir / manifest_file;
    if (!fs::exists(path)) {
        return std::nullopt;
    }
    try {
        const Json j = Json::parse(read_text_file(path));
        RunManifest m;
        m.config_hash = j.at("config_hash").get<std::string>();
        m.config = j.at("config");
        m.complete = j.at("complete").get<bool>();
        for (const auto& s : j.at("stages")) {
            StageRecord r;
            r.name = s.at("name").get<std::string>();
            r.hash = s.at("hash").get<std::string>();
            r.seed = s.at("seed").get<std::uint64_t>();
            r.status = s.at("status").get<std::string>();
            r.started_at = s.at("started_at").get<std::string>();
            r.finished_at = s.at("finished_at").get<std::string>();
            r.artifacts = s.at("artifacts").get<std::vector<std::string>>();
            r.info = s.at("info");
            if (s.contains("error")) {
                r.error = s.at("error").get<std::string>();
            }
            m.stages.push_back(std::move(r));
        }
        return m;
    } catch (const std::exception&) {
        // An unreadable manifest only disables caching.
        return std::nullopt;
    }
}

inline void write_manifest(const fs::path& out_dir, const RunManifest& m)
{
    write_text_file(out_dir / manifest_file, manifest_to_json(m).dump(2) + "\n");
}

inline std::string utc_timestamp()
{
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream ss;
    ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return ss.str();
}

// ---- report ------------------------------------------------------------------

inline constexpr std::string_view metrics_file = "metrics.csv";

// metrics.csv plus one plot-data file per (figure, tree family) with at least
// one row. Returns the written paths relative to out_dir.
inline std::vector<std::string> emit_report(const std::vector<MetricsReport>& reports, const fs::path& out_dir)
{
    require(!reports.empty(), "emit_report: no reports");
    std::vector<std::string> written;
    write_text_file(out_dir / metrics_file, metrics_to_csv(reports));
    written.emplace_back(metrics_file);

    struct Figure {
        const char* name;
        const char* header;
        std::string (*row)(const MetricsReport&);
    };
    static const Figure figures[] = {
        {"nrmse", "depth,nrmse", [](const MetricsReport& r) { return format_double(r.nrmse); }},
        {"accuracy", "depth,acc_pct", [](const MetricsReport& r) { return format_double(r.acc_pct); }},
        {"reward", "depth,mean_reward,ci95",
         [](const MetricsReport& r) { return format_double(r.mean_reward) + "," + format_double(r.ci95_half_width); }},
        {"params", "depth,param_count", [](const MetricsReport& r) { return std::to_string(r.param_count); }},
    };
    for (const char* family : {"hdt", "sdt"}) {
        std::vector<const MetricsReport*> rows;
        for (const auto& r : reports) {
            if (r.kind == family) {
                rows.push_back(&r);
            }
        }
        if (rows.empty()) {
            continue;
        }
        std::stable_sort(rows.begin(), rows.end(),
                         [](const auto* a, const auto* b) { return a->depth_or_params < b->depth_or_params; });
        for (const auto& fig : figures) {
            std::string text = std::string(fig.header) + "\n";
            for (const auto* r : rows) {
                text += std::to_string(r->depth_or_params) + "," + fig.row(*r) + "\n";
            }
            const std::string rel = std::string("plots/") + fig.name + "_" + family + ".csv";
            write_text_file(out_dir / rel, text);
            written.push_back(rel);
        }
    }
    return written;
}

// ---- pipeline ------------------------------------------------------------------

enum class Stage { Expert = 0, Dataset = 1, Students = 2, Evaluate = 3, Report = 4 };

inline const char* stage_name(Stage s)
{
    static const char* names[] = {"expert", "dataset", "students", "evaluate", "report"};
    return names[static_cast<int>(s)];
}

struct PipelineResult {
    RunManifest manifest;
    bool ok = false;
    std::vector<MetricsReport> reports;
};

struct StudentTask {
    std::string label;
    std::string kind;
    int depth = 0;
    double gamma = 0.0;
    double C = 0.0;
};

inline std::vector<StudentTask> student_tasks(const StudentSweep& s)
{
    std::vector<StudentTask> tasks;
    for (int d : s.hdt_depths) {
        tasks.push_back({"hdt_d" + std::to_string(d), "hdt", d});
    }
    for (int d : s.sdt_depths) {
        tasks.push_back({"sdt_d" + std::to_string(d), "sdt", d});
    }
    for (double g : s.km.gammas) {
        for (double c : s.km.Cs) {
            tasks.push_back({"km_g" + format_double(g) + "_c" + format_double(c), "km", 0, g, c});
        }
    }
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            require(tasks[i].label != tasks[j].label, "config: duplicate student " + tasks[i].label);
        }
    }
    return tasks;
}

namespace detail {

class Pipeline {
public:
    Pipeline(const ExperimentConfig& config, std::ostream* log)
        : config_(config), env_(make_env(config.env)), spec_(env_spec(env_)), seeds_(stage_seeds(config)),
          out_(config.output_dir), log_(log)
    {
        manifest_.config = config_to_json(config);
        manifest_.config_hash = config_hash(config);
        previous_ = read_manifest(out_);
    }

    PipelineResult run(Stage until, bool upstream_cached_only)
    {
        PipelineResult result;
        std::string upstream = hash_hex(fnv1a(config_.env));
        bool ok = true;
        for (int s = 0; s <= static_cast<int>(until) && ok; ++s) {
            const Stage stage = static_cast<Stage>(s);
            const std::string hash = stage_hash(stage, upstream);
            upstream = hash;
            if (upstream_cached_only && stage != until && !cached(stage_name(stage), hash)) {
                StageRecord r;
                r.name = stage_name(stage);
                r.hash = hash;
                r.seed = stage_seed(stage);
                r.status = "failed";
                r.error = "stage has not been run with this configuration";
                say("[" + r.name + "] " + r.error);
                manifest_.stages.push_back(std::move(r));
                ok = false;
                break;
            }
            ok = run_stage(stage, hash);
        }
        manifest_.complete = ok && until == Stage::Report;
        write_manifest(out_, manifest_);
        result.ok = ok;
        result.manifest = manifest_;
        result.reports = reports_;
        return result;
    }

private:
    std::string stage_hash(Stage stage, const std::string& upstream) const
    {
        const Json cfg = config_to_json(config_);
        Json j{{"stage", stage_name(stage)}, {"upstream", upstream}, {"env", config_.env}};
        switch (stage) {
            case Stage::Expert:
                j["config"] = cfg["expert"];
                j["seed"] = seeds_.expert;
                break;
            case Stage::Dataset:
                j["config"] = cfg["dataset"];
                j["seed"] = seeds_.dataset;
                break;
            case Stage::Students:
                j["config"] = cfg["students"];
                j["seed"] = seeds_.students;
                break;
            case Stage::Evaluate:
                j["config"] = cfg["eval"];
                j["seed"] = seeds_.eval;
                break;
            case Stage::Report:
                break;
        }
        return hash_hex(fnv1a(j.dump()));
    }

    std::uint64_t stage_seed(Stage stage) const
    {
        switch (stage) {
            case Stage::Expert:
                return seeds_.expert;
            case Stage::Dataset:
                return seeds_.dataset;
            case Stage::Students:
                return seeds_.students;
            case Stage::Evaluate:
            case Stage::Report:
                return seeds_.eval;
        }
        return 0;
    }

    bool cached(const std::string& name, const std::string& hash) const
    {
        if (!previous_) {
            return false;
        }
        const StageRecord* r = previous_->find(name);
        if (r == nullptr || r->hash != hash || r->status != "done") {
            return false;
        }
        for (const auto& a : r->artifacts) {
            if (!fs::exists(out_ / a)) {
                return false;
            }
        }
        return true;
    }

    void say(const std::string& msg) const
    {
        if (log_ != nullptr) {
            *log_ << msg << std::endl;
        }
    }

    bool run_stage(Stage stage, const std::string& hash)
    {
        const std::string name = stage_name(stage);
        if (cached(name, hash)) {
            StageRecord r = *previous_->find(name);
            manifest_.stages.push_back(r);
            say("[" + name + "] cached");
            if (stage == Stage::Evaluate) {
                reports_ = metrics_from_csv(read_text_file(out_ / evaluation_file));
            }
            if (stage == Stage::Report) {
                reports_ = metrics_from_csv(read_text_file(out_ / metrics_file));
            }
            return true;
        }
        StageRecord r;
        r.name = name;
        r.hash = hash;
        r.seed = stage_seed(stage);
        r.started_at = utc_timestamp();
        say("[" + name + "] running");
        try {
            switch (stage) {
                case Stage::Expert:
                    run_expert(r);
                    break;
                case Stage::Dataset:
                    run_dataset(r);
                    break;
                case Stage::Students:
                    run_students(r);
                    break;
                case Stage::Evaluate:
                    run_evaluate(r);
                    break;
                case Stage::Report:
                    r.artifacts = emit_report(metrics_from_csv(read_text_file(out_ / evaluation_file)), out_);
                    reports_ = metrics_from_csv(read_text_file(out_ / metrics_file));
                    r.status = "done";
                    break;
            }
        } catch (const std::exception& e) {
            r.status = "failed";
            r.error = e.what();
            say("[" + name + "] failed: " + r.error);
        }
        r.finished_at = utc_timestamp();
        const bool ok = r.status == "done";
        manifest_.stages.push_back(std::move(r));
        write_manifest(out_, manifest_);
        return ok;
    }

    void run_expert(StageRecord& r)
    {
        const DqnResult result =
            std::visit([&](const auto& env) { return train_dqn(env, config_.expert, seeds_.expert); }, env_);
        save_model(out_ / expert_model_file, Model(result.policy), config_.env);
        std::string log = "episode,reward,epsilon,loss\n";
        for (const auto& e : result.log) {
            log += std::to_string(e.episode) + "," + format_double(e.reward) + "," + format_double(e.epsilon) + "," +
                   format_double(e.loss) + "\n";
        }
        write_text_file(out_ / expert_log_file, log);
        r.artifacts = {std::string(expert_model_file), std::string(expert_log_file)};
        r.info = {{"episodes_run", result.log.size()},
                  {"selected_episode", result.selected_episode},
                  {"selected_eval_reward", result.selected_eval_reward},
                  {"selected_eval_success", result.selected_eval_success},
                  {"param_count", result.policy.parameter_count()}};
        r.status = "done";
    }

    void run_dataset(StageRecord& r)
    {
        const Controller expert = load_model(out_ / expert_model_file, &spec_);
        const std::uint64_t seed = seeds_.dataset;
        LabeledDataset raw = std::visit(
            [&](const auto& env) {
                return collect(env, expert, config_.dataset.episodes, derive_seed(seed, "collect"), config_.workers);
            },
            env_);
        const auto raw_counts = raw.class_counts();
        LabeledDataset ds = config_.dataset.balance ? balance(raw, derive_seed(seed, "balance")) : std::move(raw);
        const SplitDataset parts = split(ds, config_.dataset.split_ratio, derive_seed(seed, "split"));
        write_text_file(out_ / train_file, dataset_to_csv(parts.train));
        write_text_file(out_ / validation_file, dataset_to_csv(parts.validation));
        r.artifacts = {std::string(train_file), std::string(validation_file)};
        r.info = {{"raw_class_counts", raw_counts},
                  {"class_counts", ds.class_counts()},
                  {"size", ds.size()},
                  {"train_size", parts.train.size()},
                  {"validation_size", parts.validation.size()}};
        r.status = "done";
    }

    void run_students(StageRecord& r)
    {
        const auto tasks = student_tasks(config_.students);
        const LabeledDataset train = dataset_from_csv(read_text_file(out_ / train_file), spec_.action_count);
        const LabeledDataset validation =
            dataset_from_csv(read_text_file(out_ / validation_file), spec_.action_count);
        require(train.state_dim == spec_.state_dim, "students: training data has the wrong state_dim");
        const StateScaler scaler = StateScaler::from_spec(spec_);

        struct Row {
            std::string line;
            std::string file;
        };
        std::vector<Row> rows(tasks.size());
        parallel_for(tasks.size(), config_.workers, [&](std::size_t i) {
            const auto& t = tasks[i];
            const std::uint64_t seed = derive_seed(seeds_.students, t.label);
            Model model;
            std::string support = "";
            if (t.kind == "hdt") {
                model = train_hdt(train, t.depth);
            } else if (t.kind == "sdt") {
                const StateScaler* sc = config_.students.sdt.scale_inputs ? &scaler : nullptr;
                model = train_sdt(train, t.depth, config_.students.sdt, seed, sc).tree;
            } else {
                const auto& km = config_.students.km;
                const LabeledDataset sub =
                    km.max_points > 0 && train.size() > km.max_points ? subsample(train, km.max_points, seed) : train;
                SmoOptions opts;
                opts.tol = km.tolerance;
                opts.cache_rows = km.cache_rows;
                MulticlassKm k = train_km(sub, t.gamma, t.C, opts, &scaler);
                support = format_double(support_fraction(k));
                model = std::move(k);
            }
            const auto accuracy = [&](const LabeledDataset& ds) {
                std::size_t hits = 0;
                for (std::size_t j = 0; j < ds.size(); ++j) {
                    hits += model_predict(model, ds.state(j)) == ds.labels[j] ? 1 : 0;
                }
                return ds.empty() ? 0.0 : 100.0 * static_cast<double>(hits) / static_cast<double>(ds.size());
            };
            rows[i].file = "students/" + t.label + ".model";
            save_model(out_ / rows[i].file, model, config_.env);
            rows[i].line = t.label + "," + t.kind + "," + std::to_string(model_depth_or_params(model)) + "," +
                           std::to_string(model_param_count(model)) + "," + format_double(accuracy(train)) + "," +
                           format_double(accuracy(validation)) + "," + support + "\n";
        });
        std::string summary = "label,kind,depth_or_params,param_count,train_acc_pct,validation_acc_pct,support_fraction\n";
        for (const auto& row : rows) {
            summary += row.line;
            r.artifacts.push_back(row.file);
        }
        write_text_file(out_ / students_summary_file, summary);
        r.artifacts.emplace_back(students_summary_file);
        r.info = {{"student_count", tasks.size()}};
        r.status = "done";
    }

    void run_evaluate(StageRecord& r)
    {
        const Controller expert = load_model(out_ / expert_model_file, &spec_);
        std::vector<Controller> students;
        for (const auto& t : student_tasks(config_.students)) {
            students.push_back(load_model(out_ / ("students/" + t.label + ".model"), &spec_));
        }
        std::vector<MetricsReport> all = std::visit(
            [&](const auto& env) { return evaluate_all(env, expert, students, eval_config_for(config_, spec_)); },
            env_);
        std::vector<MetricsReport> good;
        Json failures = Json::array();
        for (auto& rep : all) {
            if (rep.failure) {
                failures.push_back({{"label", rep.label}, {"error", *rep.failure}});
            } else {
                good.push_back(std::move(rep));
            }
        }
        write_text_file(out_ / evaluation_file, metrics_to_csv(good));
        r.artifacts = {std::string(evaluation_file)};
        r.info = {{"controllers", all.size()}, {"failures", failures}};
        r.status = failures.empty() ? "done" : "partial";
        if (!failures.empty()) {
            r.error = std::to_string(failures.size()) + " controller(s) failed evaluation";
        }
        reports_ = std::move(good);
    }

    static constexpr std::string_view expert_model_file = "expert.model";
    static constexpr std::string_view expert_log_file = "expert_training.csv";
    static constexpr std::string_view train_file = "dataset/train.dataset.csv";
    static constexpr std::string_view validation_file = "dataset/validation.dataset.csv";
    static constexpr std::string_view students_summary_file = "students/summary.csv";
    static constexpr std::string_view evaluation_file = "evaluation.metrics.csv";

    const ExperimentConfig& config_;
    AnyEnv env_;
    EnvSpec spec_;
    StageSeeds seeds_;
    fs::path out_;
    std::ostream* log_;
    RunManifest manifest_;
    std::optional<RunManifest> previous_;
    std::vector<MetricsReport> reports_;
};

}  // namespace detail

struct PipelineOptions {
    Stage until = Stage::Report;
    // Fail instead of recomputing when a stage before `until` is not cached.
    bool upstream_cached_only = false;
    std::ostream* log = nullptr;
};

// Runs stages in order up to and including options.until, reusing cached
// stages. Stage failures do not throw: the manifest records them and ok is
// false.
inline PipelineResult run_pipeline(const ExperimentConfig& config, const PipelineOptions& options = {})
{
    config.validate();
    fs::create_directories(config.output_dir);
    return detail::Pipeline(config, options.log).run(options.until, options.upstream_cached_only);
}

}  // namespace distill
