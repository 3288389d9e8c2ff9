#pragma once

// Text formats: `.model` files (line-oriented key/value records),
// `.dataset.csv` and `.metrics.csv`. Numbers are written in shortest
// round-trip decimal form, so parse(serialize(x)) restores every double.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "distill/common.hpp"
#include "distill/dataset.hpp"
#include "distill/metrics.hpp"
#include "distill/model.hpp"

namespace distill {

inline constexpr int model_format_version = 1;
inline constexpr std::string_view model_magic = "distill-model";

struct ModelFile {
    int format_version = model_format_version;
    std::string env_name;
    Model model;
};

// ---- file helpers ----------------------------------------------------------

inline std::string read_text_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Writes to a sibling temp file, then renames over the target.
inline void write_text_file(const std::filesystem::path& path, std::string_view content)
{
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw std::runtime_error("cannot write " + tmp.string());
        }
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) {
            throw std::runtime_error("write failed: " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

// ---- model writer ------------------------------------------------------------

namespace detail {

class RecordWriter {
public:
    RecordWriter& key(std::string_view k)
    {
        if (!line_open_) {
            line_open_ = true;
        } else {
            out_ << '\n';
        }
        out_ << k;
        return *this;
    }
    RecordWriter& num(double v)
    {
        out_ << ' ' << format_double(v);
        return *this;
    }
    template <typename Int>
        requires std::is_integral_v<Int>
    RecordWriter& integer(Int v)
    {
        out_ << ' ' << v;
        return *this;
    }
    RecordWriter& word(std::string_view w)
    {
        out_ << ' ' << w;
        return *this;
    }
    RecordWriter& nums(std::span<const double> vs)
    {
        integer(vs.size());
        for (double v : vs) {
            num(v);
        }
        return *this;
    }
    std::string finish()
    {
        key("end");
        out_ << '\n';
        return out_.str();
    }

private:
    std::ostringstream out_;
    bool line_open_ = false;
};

inline void write_scaler(RecordWriter& w, const StateScaler& s)
{
    w.key("scaler_center").nums(s.center);
    w.key("scaler_half_range").nums(s.half_range);
}

inline void write_payload(RecordWriter& w, const QPolicy& p)
{
    w.key("layers").integer(p.net.layer_sizes.size());
    for (int n : p.net.layer_sizes) {
        w.integer(n);
    }
    write_scaler(w, p.scaler);
    w.key("params").nums(p.net.params);
}

inline void write_payload(RecordWriter& w, const HardTree& t)
{
    w.key("max_depth").integer(t.max_depth);
    w.key("node_count").integer(t.nodes.size());
    for (const auto& n : t.nodes) {
        w.key("node").integer(n.feature).num(n.threshold).integer(n.left).integer(n.right).integer(n.depth).integer(
            n.prediction);
        w.integer(n.counts.size());
        for (auto c : n.counts) {
            w.integer(c);
        }
    }
}

inline void write_payload(RecordWriter& w, const SoftTree& t)
{
    w.key("depth").integer(t.depth);
    w.key("routing").word(t.routing == SdtRouting::Hard ? "hard" : "expectation");
    w.key("beta").num(t.beta);
    write_scaler(w, t.scaler);
    w.key("filters").nums(t.filters);
    w.key("biases").nums(t.biases);
    w.key("leaf_logits").nums(t.leaf_logits);
}

inline void write_payload(RecordWriter& w, const MulticlassKm& k)
{
    w.key("gamma").num(k.gamma);
    w.key("C").num(k.C);
    w.key("training_size").integer(k.training_size);
    write_scaler(w, k.scaler);
    w.key("machine_count").integer(k.machines.size());
    for (const auto& m : k.machines) {
        w.key("machine").integer(m.positive_class).integer(m.negative_class).num(m.km.offset).integer(
            m.km.converged ? 1 : 0);
        w.integer(m.km.iterations).integer(m.km.support_count());
        for (std::size_t i = 0; i < m.km.support_count(); ++i) {
            w.key("sv").integer(m.km.support_indices[i]).num(m.km.dual_coef[i]);
            for (double v : m.km.support_vector(i)) {
                w.num(v);
            }
        }
    }
}

}  // namespace detail

inline std::string serialize_model(const Model& model, std::string_view env_name)
{
    require(!env_name.empty() && env_name.find_first_of(" \t\n") == std::string_view::npos,
            "serialize_model: env name must be a single word");
    detail::RecordWriter w;
    w.key(model_magic);
    w.key("format_version").integer(model_format_version);
    w.key("kind").word(model_kind(model));
    w.key("env").word(env_name);
    w.key("state_dim").integer(model_state_dim(model));
    w.key("action_count").integer(model_action_count(model));
    std::visit([&](const auto& m) { detail::write_payload(w, m); }, model);
    return w.finish();
}

// ---- model reader ------------------------------------------------------------

namespace detail {

class RecordReader {
public:
    explicit RecordReader(std::string_view text)
    {
        std::size_t start = 0;
        while (start <= text.size()) {
            auto end = text.find('\n', start);
            if (end == std::string_view::npos) {
                end = text.size();
            }
            lines_.push_back(text.substr(start, end - start));
            start = end + 1;
        }
    }

    [[noreturn]] void fail(std::string_view field, const std::string& message) const
    {
        throw ParseError("line " + std::to_string(current_) + ", field '" + std::string(field) + "': " + message);
    }

    // Next nonblank line; its first token must be `key`.
    void expect(std::string_view key)
    {
        tokens_.clear();
        while (next_ < lines_.size()) {
            current_ = next_ + 1;
            tokenize(lines_[next_++]);
            if (!tokens_.empty()) {
                break;
            }
        }
        if (tokens_.empty()) {
            current_ = lines_.size();
            fail(key, "unexpected end of file");
        }
        if (tokens_[0] != key) {
            fail(key, "expected '" + std::string(key) + "', found '" + std::string(tokens_[0]) + "'");
        }
        key_ = key;
        pos_ = 1;
    }

    std::string_view word()
    {
        if (pos_ >= tokens_.size()) {
            fail(key_, "missing value");
        }
        return tokens_[pos_++];
    }

    double num()
    {
        const auto t = word();
        double v = 0.0;
        if (!parse_double(t, v)) {
            fail(key_, "expected a number, got '" + std::string(t) + "'");
        }
        return v;
    }

    template <typename Int>
    Int integer()
    {
        const auto t = word();
        Int v{};
        if (!parse_int(t, v)) {
            fail(key_, "expected an integer, got '" + std::string(t) + "'");
        }
        return v;
    }

    std::size_t count(std::size_t limit = std::size_t{1} << 28)
    {
        const auto n = integer<std::size_t>();
        if (n > limit) {
            fail(key_, "count too large");
        }
        return n;
    }

    std::vector<double> nums()
    {
        const std::size_t n = count();
        std::vector<double> out(n);
        for (auto& v : out) {
            v = num();
        }
        return out;
    }

    void done()
    {
        if (pos_ != tokens_.size()) {
            fail(key_, "unexpected trailing value '" + std::string(tokens_[pos_]) + "'");
        }
    }

    // All remaining lines must be blank.
    void at_end()
    {
        for (std::size_t i = next_; i < lines_.size(); ++i) {
            tokenize(lines_[i]);
            if (!tokens_.empty()) {
                current_ = i + 1;
                fail("end", "content after end marker");
            }
        }
    }

    std::size_t line() const { return current_; }

private:
    void tokenize(std::string_view line)
    {
        tokens_.clear();
        std::size_t i = 0;
        while (i < line.size()) {
            while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) {
                ++i;
            }
            const auto start = i;
            while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') {
                ++i;
            }
            if (i > start) {
                tokens_.push_back(line.substr(start, i - start));
            }
        }
    }

    std::vector<std::string_view> lines_;
    std::vector<std::string_view> tokens_;
    std::string_view key_;
    std::size_t next_ = 0;
    std::size_t current_ = 0;
    std::size_t pos_ = 0;
};

inline std::vector<double> read_nums(RecordReader& r, std::string_view key, std::size_t expected)
{
    r.expect(key);
    auto v = r.nums();
    r.done();
    if (v.size() != expected) {
        r.fail(key, "expected " + std::to_string(expected) + " values, got " + std::to_string(v.size()));
    }
    return v;
}

inline StateScaler read_scaler(RecordReader& r, int dim)
{
    StateScaler s;
    s.center = read_nums(r, "scaler_center", static_cast<std::size_t>(dim));
    s.half_range = read_nums(r, "scaler_half_range", static_cast<std::size_t>(dim));
    for (double h : s.half_range) {
        if (!(h > 0.0)) {
            r.fail("scaler_half_range", "values must be positive");
        }
    }
    return s;
}

inline QPolicy read_mlp(RecordReader& r, int dim, int actions)
{
    r.expect("layers");
    const auto n = r.count(64);
    std::vector<int> sizes(n);
    for (auto& s : sizes) {
        s = r.integer<int>();
        if (s < 1) {
            r.fail("layers", "layer sizes must be positive");
        }
    }
    r.done();
    if (n < 2) {
        r.fail("layers", "need at least two layers");
    }
    if (sizes.front() != dim) {
        r.fail("layers", "input size does not match state_dim");
    }
    if (sizes.back() != actions) {
        r.fail("layers", "output size does not match action_count");
    }
    QPolicy p{nn::Mlp(sizes), read_scaler(r, dim), actions};
    p.net.params = read_nums(r, "params", nn::count_parameters(sizes));
    return p;
}

inline HardTree read_hdt(RecordReader& r, int dim, int actions)
{
    HardTree t;
    t.state_dim = dim;
    t.action_count = actions;
    r.expect("max_depth");
    t.max_depth = r.integer<int>();
    r.done();
    if (t.max_depth < 1) {
        r.fail("max_depth", "must be >= 1");
    }
    r.expect("node_count");
    const auto n = r.count();
    r.done();
    if (n == 0) {
        r.fail("node_count", "tree has no nodes");
    }
    t.nodes.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto& node = t.nodes[i];
        r.expect("node");
        node.feature = r.integer<int>();
        node.threshold = r.num();
        node.left = r.integer<int>();
        node.right = r.integer<int>();
        node.depth = r.integer<int>();
        node.prediction = r.integer<int>();
        node.counts.resize(r.count(1024));
        for (auto& c : node.counts) {
            c = r.integer<std::size_t>();
        }
        r.done();
        if (node.counts.size() != static_cast<std::size_t>(actions)) {
            r.fail("node", "class count length does not match action_count");
        }
        if (node.prediction < 0 || node.prediction >= actions) {
            r.fail("node", "prediction out of range");
        }
        if (node.feature >= dim || node.feature < -1) {
            r.fail("node", "feature out of range");
        }
        if (!node.is_leaf()) {
            const auto in_range = [&](int c) { return c > static_cast<int>(i) && c < static_cast<int>(n); };
            if (!in_range(node.left) || !in_range(node.right)) {
                r.fail("node", "child index out of range");
            }
        }
    }
    return t;
}

inline SoftTree read_sdt(RecordReader& r, int dim, int actions)
{
    r.expect("depth");
    const int depth = r.integer<int>();
    r.done();
    if (depth < 1 || depth > 12) {
        r.fail("depth", "must be in [1, 12]");
    }
    if (actions < 2) {
        r.fail("action_count", "must be >= 2");
    }
    SoftTree t(depth, dim, actions);
    r.expect("routing");
    const auto mode = r.word();
    r.done();
    if (mode == "hard") {
        t.routing = SdtRouting::Hard;
    } else if (mode == "expectation") {
        t.routing = SdtRouting::Expectation;
    } else {
        r.fail("routing", "unknown routing '" + std::string(mode) + "'");
    }
    r.expect("beta");
    t.beta = r.num();
    r.done();
    t.scaler = read_scaler(r, dim);
    t.filters = read_nums(r, "filters", t.filters.size());
    t.biases = read_nums(r, "biases", t.biases.size());
    t.leaf_logits = read_nums(r, "leaf_logits", t.leaf_logits.size());
    return t;
}

inline MulticlassKm read_km(RecordReader& r, int dim, int actions)
{
    MulticlassKm k;
    k.state_dim = dim;
    k.action_count = actions;
    r.expect("gamma");
    k.gamma = r.num();
    r.done();
    r.expect("C");
    k.C = r.num();
    r.done();
    r.expect("training_size");
    k.training_size = r.integer<std::size_t>();
    r.done();
    k.scaler = read_scaler(r, dim);
    r.expect("machine_count");
    const auto m = r.count();
    r.done();
    const auto pairs = static_cast<std::size_t>(actions) * static_cast<std::size_t>(actions - 1) / 2;
    if (m != pairs) {
        r.fail("machine_count", "expected " + std::to_string(pairs) + " machines for " + std::to_string(actions) +
                                    " classes");
    }
    for (std::size_t i = 0; i < m; ++i) {
        MulticlassKm::Machine mach;
        r.expect("machine");
        mach.positive_class = r.integer<int>();
        mach.negative_class = r.integer<int>();
        mach.km.offset = r.num();
        mach.km.converged = r.integer<int>() != 0;
        mach.km.iterations = r.integer<std::size_t>();
        const auto svs = r.count();
        r.done();
        if (mach.positive_class < 0 || mach.negative_class >= actions || mach.positive_class >= mach.negative_class) {
            r.fail("machine", "bad class pair");
        }
        mach.km.state_dim = dim;
        mach.km.gamma = k.gamma;
        mach.km.C = k.C;
        for (std::size_t s = 0; s < svs; ++s) {
            r.expect("sv");
            const auto idx = r.integer<std::size_t>();
            if (idx >= k.training_size) {
                r.fail("sv", "support index beyond training_size");
            }
            mach.km.support_indices.push_back(idx);
            mach.km.dual_coef.push_back(r.num());
            for (int d = 0; d < dim; ++d) {
                mach.km.support_vectors.push_back(r.num());
            }
            r.done();
        }
        k.machines.push_back(std::move(mach));
    }
    return k;
}

}  // namespace detail

// Throws ParseError with "line N, field 'f'" context; never returns a
// partial model.
inline ModelFile parse_model(std::string_view text)
{
    detail::RecordReader r(text);
    r.expect(model_magic);
    r.done();
    r.expect("format_version");
    const int version = r.integer<int>();
    r.done();
    if (version < 1 || version > model_format_version) {
        r.fail("format_version", "unsupported format_version " + std::to_string(version));
    }
    r.expect("kind");
    const std::string kind(r.word());
    r.done();
    r.expect("env");
    const std::string env(r.word());
    r.done();
    r.expect("state_dim");
    const int dim = r.integer<int>();
    r.done();
    if (dim < 1 || dim > 4096) {
        r.fail("state_dim", "must be in [1, 4096]");
    }
    r.expect("action_count");
    const int actions = r.integer<int>();
    r.done();
    if (actions < 1 || actions > 1024) {
        r.fail("action_count", "must be in [1, 1024]");
    }

    ModelFile file;
    file.format_version = version;
    file.env_name = env;
    if (kind == "mlp") {
        file.model = detail::read_mlp(r, dim, actions);
    } else if (kind == "hdt") {
        file.model = detail::read_hdt(r, dim, actions);
    } else if (kind == "sdt") {
        file.model = detail::read_sdt(r, dim, actions);
    } else if (kind == "km") {
        file.model = detail::read_km(r, dim, actions);
    } else {
        r.fail("kind", "unknown model kind '" + kind + "'");
    }
    r.expect("end");
    r.done();
    r.at_end();
    return file;
}

// Throws InvalidInput when the model does not fit the environment.
inline void validate_model_for(const Model& model, const EnvSpec& spec)
{
    if (model_state_dim(model) != spec.state_dim) {
        throw InvalidInput("model state_dim " + std::to_string(model_state_dim(model)) + " does not match " +
                           spec.name + " state_dim " + std::to_string(spec.state_dim));
    }
    if (model_action_count(model) != spec.action_count) {
        throw InvalidInput("model action_count " + std::to_string(model_action_count(model)) + " does not match " +
                           spec.name + " action_count " + std::to_string(spec.action_count));
    }
}

inline void save_model(const std::filesystem::path& path, const Model& model, std::string_view env_name)
{
    write_text_file(path, serialize_model(model, env_name));
}

inline ModelFile read_model_file(const std::filesystem::path& path)
{
    try {
        return parse_model(read_text_file(path));
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

// ---- CSV -------------------------------------------------------------------

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line)
{
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        if (comma == std::string_view::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
}

inline std::vector<std::string_view> csv_lines(std::string_view text)
{
    std::vector<std::string_view> lines;
    std::size_t start = 0;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos) {
            end = text.size();
        }
        auto line = text.substr(start, end - start);
        if (!line.empty() && line.back() == '\r') {
            line.remove_suffix(1);
        }
        if (!line.empty()) {
            lines.push_back(line);
        }
        start = end + 1;
    }
    return lines;
}

[[noreturn]] inline void csv_fail(std::size_t line, std::string_view column, const std::string& msg)
{
    throw ParseError("line " + std::to_string(line) + ", column '" + std::string(column) + "': " + msg);
}

}  // namespace detail

inline std::string dataset_to_csv(const LabeledDataset& ds)
{
    std::string out;
    for (int d = 0; d < ds.state_dim; ++d) {
        out += "s" + std::to_string(d) + ",";
    }
    out += "action\n";
    for (std::size_t i = 0; i < ds.size(); ++i) {
        for (double v : ds.state(i)) {
            out += format_double(v);
            out += ',';
        }
        out += std::to_string(ds.labels[i]);
        out += '\n';
    }
    return out;
}

inline LabeledDataset dataset_from_csv(std::string_view text, int action_count)
{
    const auto lines = detail::csv_lines(text);
    if (lines.empty()) {
        detail::csv_fail(1, "header", "missing header");
    }
    const auto header = detail::split_csv_line(lines[0]);
    if (header.size() < 2 || header.back() != "action") {
        detail::csv_fail(1, "header", "last column must be 'action'");
    }
    const int dim = static_cast<int>(header.size()) - 1;
    for (int d = 0; d < dim; ++d) {
        if (header[static_cast<std::size_t>(d)] != "s" + std::to_string(d)) {
            detail::csv_fail(1, header[static_cast<std::size_t>(d)], "expected s" + std::to_string(d));
        }
    }
    LabeledDataset ds(dim, action_count);
    StateVector s(static_cast<std::size_t>(dim));
    for (std::size_t li = 1; li < lines.size(); ++li) {
        const auto cells = detail::split_csv_line(lines[li]);
        if (cells.size() != header.size()) {
            detail::csv_fail(li + 1, "row", "expected " + std::to_string(header.size()) + " cells");
        }
        for (int d = 0; d < dim; ++d) {
            if (!parse_double(cells[static_cast<std::size_t>(d)], s[static_cast<std::size_t>(d)])) {
                detail::csv_fail(li + 1, header[static_cast<std::size_t>(d)], "not a number");
            }
        }
        int a = 0;
        if (!parse_int(cells.back(), a) || a < 0 || a >= action_count) {
            detail::csv_fail(li + 1, "action", "invalid action '" + std::string(cells.back()) + "'");
        }
        ds.push(s, a);
    }
    return ds;
}

inline constexpr std::string_view metrics_csv_header =
    "label,kind,depth_or_params,mean_reward,ci95,nrmse,acc_pct,param_count,n_episodes,seed";

inline std::string metrics_to_csv(const std::vector<MetricsReport>& reports)
{
    std::string out(metrics_csv_header);
    out += '\n';
    for (const auto& r : reports) {
        require(!r.failure, "metrics_to_csv: report '" + r.label + "' failed and has no metrics");
        require(r.label.find_first_of(",\n") == std::string::npos, "metrics_to_csv: label contains a comma");
        out += r.label + "," + r.kind + "," + std::to_string(r.depth_or_params) + "," + format_double(r.mean_reward) +
               "," + format_double(r.ci95_half_width) + "," + format_double(r.nrmse) + "," + format_double(r.acc_pct) +
               "," + std::to_string(r.param_count) + "," + std::to_string(r.n_eval_episodes) + "," +
               std::to_string(r.seed) + "\n";
    }
    return out;
}

inline std::vector<MetricsReport> metrics_from_csv(std::string_view text)
{
    const auto lines = detail::csv_lines(text);
    if (lines.empty() || lines[0] != metrics_csv_header) {
        detail::csv_fail(1, "header", "unexpected metrics header");
    }
    const auto cols = detail::split_csv_line(metrics_csv_header);
    std::vector<MetricsReport> out;
    for (std::size_t li = 1; li < lines.size(); ++li) {
        const auto c = detail::split_csv_line(lines[li]);
        if (c.size() != cols.size()) {
            detail::csv_fail(li + 1, "row", "expected " + std::to_string(cols.size()) + " cells");
        }
        MetricsReport r;
        r.label = std::string(c[0]);
        r.kind = std::string(c[1]);
        const auto num = [&](std::size_t i, double& v) {
            if (!parse_double(c[i], v)) {
                detail::csv_fail(li + 1, cols[i], "not a number");
            }
        };
        const auto integer = [&](std::size_t i, auto& v) {
            if (!parse_int(c[i], v)) {
                detail::csv_fail(li + 1, cols[i], "not an integer");
            }
        };
        integer(2, r.depth_or_params);
        num(3, r.mean_reward);
        num(4, r.ci95_half_width);
        num(5, r.nrmse);
        num(6, r.acc_pct);
        integer(7, r.param_count);
        integer(8, r.n_eval_episodes);
        integer(9, r.seed);
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace distill
