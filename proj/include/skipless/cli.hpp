#pragma once

// Batch experiment runner behind the skipless-lab tool. Every command turns a
// RunConfig into one report (CSV with '#' echo lines, or JSON lines), written
// atomically.

#include <charconv>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "skipless/analysis.hpp"
#include "skipless/harness.hpp"
#include "skipless/init.hpp"
#include "skipless/jacobian_check.hpp"
#include "skipless/parallel.hpp"

namespace skipless::cli {

inline constexpr const char* kToolName = "skipless-lab";
inline constexpr const char* kVersion = "0.1.0";

/// Bad command line or config file. Exit code 2.
class UsageError : public std::runtime_error {
public:
    UsageError(std::string key, const std::string& what) : std::runtime_error(what), key_(std::move(key)) {}
    const std::string& key() const { return key_; }

private:
    std::string key_;
};

enum class Type { integer, real, boolean, text, seed };
enum class Format { csv, records };

inline const char* to_string(Format f) { return f == Format::csv ? "csv" : "records"; }

struct Param {
    std::string key;
    Type type;
    std::string fallback;  // empty with required = true means no default
    std::string help;
    bool required = false;
    std::vector<std::string> choices;
};

struct Command {
    std::string name;
    std::string help;
    Format format;
    std::vector<Param> params;
};

// ------------------------------------------------------------------ values ---

/// Shortest round-trip text; +-inf becomes INFINITE, NaN becomes empty.
inline std::string format_number(double v) {
    if (std::isnan(v)) return "";
    if (std::isinf(v)) return v > 0 ? "INFINITE" : "-INFINITE";
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

namespace detail {

inline UsageError mismatch(const std::string& key, const char* expected, const std::string& text) {
    return UsageError(key, "type mismatch for '" + key + "': expected " + expected + ", got '" + text + "'");
}

template <class T>
T parse_integral(const std::string& key, const std::string& text, const char* expected) {
    T value{};
    const char* first = text.data();
    const char* last = first + text.size();
    if (first != last && *first == '+') ++first;
    auto [end, ec] = std::from_chars(first, last, value);
    if (text.empty() || ec != std::errc() || end != last) throw mismatch(key, expected, text);
    return value;
}

inline double parse_real(const std::string& key, const std::string& text) {
    double value = 0.0;
    const char* first = text.data();
    const char* last = first + text.size();
    if (first != last && *first == '+') ++first;
    auto [end, ec] = std::from_chars(first, last, value);
    if (text.empty() || ec != std::errc() || end != last || !std::isfinite(value))
        throw mismatch(key, "a finite real number", text);
    return value;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "true") return true;
    if (text == "false") return false;
    throw mismatch(key, "true or false", text);
}

/// Parses text as the parameter's type and returns the canonical spelling.
inline std::string canonical(const Param& p, const std::string& text) {
    switch (p.type) {
        case Type::integer: return std::to_string(parse_integral<long long>(p.key, text, "an integer"));
        case Type::seed: return std::to_string(parse_integral<std::uint64_t>(p.key, text, "an unsigned 64-bit integer"));
        case Type::real: return format_number(parse_real(p.key, text));
        case Type::boolean: return parse_bool(p.key, text) ? "true" : "false";
        case Type::text: break;
    }
    if (!p.choices.empty() && std::find(p.choices.begin(), p.choices.end(), text) == p.choices.end()) {
        std::string list;
        for (const auto& c : p.choices) list += (list.empty() ? "" : ", ") + c;
        throw UsageError(p.key, "invalid value for '" + p.key + "': '" + text + "' (expected one of " + list + ")");
    }
    return text;
}

inline Param integer(std::string key, std::string fallback, std::string help) {
    return {std::move(key), Type::integer, std::move(fallback), std::move(help)};
}
inline Param real(std::string key, std::string fallback, std::string help) {
    return {std::move(key), Type::real, std::move(fallback), std::move(help)};
}
inline Param boolean(std::string key, std::string fallback, std::string help) {
    return {std::move(key), Type::boolean, std::move(fallback), std::move(help)};
}
inline Param choice(std::string key, std::string fallback, std::vector<std::string> choices, std::string help) {
    return {std::move(key), Type::text, std::move(fallback), std::move(help), false, std::move(choices)};
}

inline std::vector<Param> model_params(const char* n, const char* d, const char* heads, const char* layers) {
    return {integer("n", n, "tokens per sample"),
            integer("d", d, "model width"),
            integer("heads", heads, "attention heads"),
            integer("layers", layers, "blocks"),
            integer("mlp_hidden", "0", "MLP hidden width (0: 4d)"),
            choice("activation", "gelu", {"gelu", "relu", "identity"}, "MLP activation"),
            real("attention_scale", "0", "logit divisor (0: sqrt(d/heads))")};
}

inline std::vector<Param> proposed_params() {
    return {real("alpha", "2", "mimetic weight on Z"),
            real("beta", "0.6", "mimetic weight on I"),
            real("c", "3", "value/output scale"),
            real("mlp_gain", "1", "MLP orthogonal gain"),
            real("trunc_std", "0.02", "default-init standard deviation"),
            real("trunc_bound", "2", "default-init truncation in standard deviations")};
}

template <class... Vs>
std::vector<Param> concat(Vs&&... vs) {
    std::vector<Param> out;
    (out.insert(out.end(), vs.begin(), vs.end()), ...);
    return out;
}

}  // namespace detail

/// All commands with their parameters in report column order. Every command also takes seed.
inline const std::vector<Command>& commands() {
    using namespace detail;
    static const std::vector<Command> table = [] {
        std::vector<Command> t;
        t.push_back({"prop1", "softmax conditioning of alpha G + beta I", Format::csv,
                     {integer("n", "10", "matrix size"), real("alpha", "0.1", "Gaussian weight"),
                      real("beta", "0", "identity weight"), real("temperature", "1", "softmax temperature"),
                      integer("trials", "100", "independent draws")}});
        t.push_back({"moments", "Monte-Carlo moments of XX^T, XZX^T and the margin", Format::csv,
                     {integer("d", "64", "width"), real("alpha", "2", "weight on B"), real("beta", "0.6", "weight on A"),
                      integer("trials", "100000", "independent draws")}});
        t.push_back({"jacobian-check", "analytic Jacobians against central differences", Format::csv,
                     {integer("n", "6", "tokens"), integer("d", "8", "width"), integer("heads", "1", "heads"),
                      integer("layers", "3", "depth for chain checks"), integer("seeds", "20", "instances"),
                      real("tolerance", "1e-5", "relative Frobenius tolerance"),
                      boolean("randomize_shapes", "false", "draw n <= n and d <= d per instance")}});
        t.push_back({"ksplit", "dominant/perturbation split of K_l", Format::csv,
                     concat(model_params("16", "32", "1", "4"),
                            std::vector<Param>{choice("init", "proposed", {"default", "proposed"}, "init scheme"),
                                               boolean("skip", "false", "residual connections"),
                                               boolean("per_head", "false", "one row per head"),
                                               real("input_std", "1", "input entry standard deviation")},
                            proposed_params())});
        t.push_back({"concat-bound", "worst-block bound for [A B] on random pairs", Format::csv,
                     {integer("trials", "1000", "accepted pairs"), integer("rows", "32", "rows of A and B"),
                      integer("cols", "8", "columns of A and of B")}});
        t.push_back({"profile", "per-layer conditioning under the three regimes", Format::records,
                     concat(model_params("16", "32", "1", "4"),
                            std::vector<Param>{boolean("use_mlp", "true", "include the MLP sub-block"),
                                               integer("batch", "2", "inputs in the parameter Jacobian"),
                                               boolean("param_jacobian", "true", "compute kappa(J_l)"),
                                               real("input_std", "1", "input entry standard deviation")},
                            proposed_params())});
        t.push_back(
            {"train", "toy classification training run", Format::records,
             concat(std::vector<Param>{{"data", Type::text, "", "tensor file; empty: synthetic task"},
                                       integer("classes", "10", "synthetic classes"),
                                       integer("samples", "1000", "synthetic samples"),
                                       real("noise", "1", "synthetic noise standard deviation"),
                                       {"data_seed", Type::seed, "1000", "synthetic data seed"}},
                    model_params("8", "64", "4", "6"),
                    std::vector<Param>{boolean("skip", "false", "residual connections"),
                                       boolean("layer_norm", "true", "pre-norm on both sub-blocks"),
                                       choice("init", "proposed", {"default", "proposed"}, "init scheme")},
                    proposed_params(),
                    std::vector<Param>{choice("optimizer", "adam_decoupled", {"adam_decoupled", "sgd_momentum"}, "optimizer"),
                                       real("lr", "0.001", "learning rate"), real("weight_decay", "0.05", "decoupled weight decay"),
                                       real("momentum", "0.9", "sgd momentum"), real("beta1", "0.9", "adam beta1"),
                                       real("beta2", "0.999", "adam beta2"), real("eps", "1e-8", "adam epsilon"),
                                       integer("steps", "2000", "optimizer steps"), integer("batch_size", "8", "minibatch size"),
                                       integer("log_every", "1", "loss row every k steps"),
                                       integer("kappa_probe_every", "0", "kappa(K_l) probe period (0: never)")})});
        t.push_back({"init-report", "spectra of freshly initialized attention weights", Format::csv,
                     concat(std::vector<Param>{{"scheme", Type::text, "", "default or proposed", true, {"default", "proposed"}},
                                               integer("d", "64", "width"), integer("heads", "1", "heads"),
                                               integer("layers", "1", "blocks"),
                                               integer("mlp_hidden", "0", "MLP hidden width (0: 4d)")},
                            proposed_params())});
        for (Command& c : t) c.params.push_back({"seed", Type::seed, "0", "master seed"});
        return t;
    }();
    return table;
}

inline const Command& find_command(const std::string& name) {
    for (const Command& c : commands())
        if (c.name == name) return c;
    throw UsageError("command", "unknown command '" + name + "'");
}

// -------------------------------------------------------------- RunConfig ---

struct RunConfig {
    std::string command;
    std::vector<std::pair<std::string, std::string>> parameters;  // schema order, canonical text
    std::string out_path;                                         // empty: standard output
    std::uint64_t seed = 0;
    Format format = Format::csv;
    bool wall_time = false;

    const std::string& raw(const std::string& key) const {
        for (const auto& [k, v] : parameters)
            if (k == key) return v;
        throw std::out_of_range("no parameter '" + key + "' for " + command);
    }
    bool has(const std::string& key) const {
        for (const auto& kv : parameters)
            if (kv.first == key) return true;
        return false;
    }
    int integer(const std::string& key) const {
        const long long v = detail::parse_integral<long long>(key, raw(key), "an integer");
        if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
            throw UsageError(key, "value of '" + key + "' is out of range");
        return static_cast<int>(v);
    }
    double real(const std::string& key) const { return detail::parse_real(key, raw(key)); }
    bool boolean(const std::string& key) const { return detail::parse_bool(key, raw(key)); }
    std::uint64_t unsigned_integer(const std::string& key) const {
        return detail::parse_integral<std::uint64_t>(key, raw(key), "an unsigned 64-bit integer");
    }
    const std::string& text(const std::string& key) const { return raw(key); }
};

/// Help or version text requested on the command line.
struct InfoRequest : std::runtime_error {
    explicit InfoRequest(const std::string& text) : std::runtime_error(text) {}
};

/// Command line (without the program name). `--config file` reads an INI file whose
/// `[command]` section supplies defaults; flags override it.
inline RunConfig parse_config(const std::vector<std::string>& args) {
    CLI::App app{"Conditioning experiments for skipless transformers", kToolName};
    app.set_config("--config", "", "INI file with [command] sections");
    app.set_version_flag("--version", std::string(kToolName) + " " + kVersion);
    app.allow_config_extras(CLI::config_extras_mode::error);
    app.require_subcommand(1, 1);
    app.fallthrough();

    struct Slot {
        std::string value;
        CLI::Option* option = nullptr;
    };
    std::map<std::string, std::map<std::string, Slot>> slots;
    std::map<std::string, CLI::App*> subs;
    for (const Command& c : commands()) {
        CLI::App* sub = app.add_subcommand(c.name, c.help);
        subs[c.name] = sub;
        auto& s = slots[c.name];
        for (const Param& p : c.params) {
            std::string help = p.help;
            if (p.required) help += " (required)";
            else if (!p.fallback.empty()) help += " [" + p.fallback + "]";
            static const char* const type_names[] = {"INT", "REAL", "BOOL", "TEXT", "UINT"};
            s[p.key].option = sub->add_option("--" + p.key, s[p.key].value, help)
                                  ->type_name(type_names[static_cast<int>(p.type)]);
        }
        s["out"].option = sub->add_option("--out", s["out"].value, "report path (default: standard output)");
        s["format"].option = sub->add_option("--format", s["format"].value,
                                             std::string("csv or records [") + to_string(c.format) + "]");
        s["wall_time"].option = sub->add_option("--wall_time", s["wall_time"].value, "add wall time to the report [false]");
    }

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        throw InfoRequest(app.help());
    } catch (const CLI::CallForAllHelp&) {
        throw InfoRequest(app.help("", CLI::AppFormatMode::All));
    } catch (const CLI::CallForVersion&) {
        throw InfoRequest(std::string(kToolName) + " " + kVersion + "\n");
    } catch (const CLI::ParseError& e) {
        throw UsageError("", e.what());
    }
    for (const auto& [name, sub] : subs)
        for (CLI::App* nested : sub->get_subcommands())
            if (nested->parsed()) throw UsageError("command", "nested commands are not supported");

    RunConfig cfg;
    for (const auto& [name, sub] : subs)
        if (sub->parsed()) cfg.command = name;
    const Command& cmd = find_command(cfg.command);
    auto& s = slots[cfg.command];
    auto given = [&](const std::string& key) { return s[key].option->count() > 0; };

    for (const Param& p : cmd.params) {
        if (given(p.key)) {
            cfg.parameters.emplace_back(p.key, detail::canonical(p, s[p.key].value));
        } else if (p.required) {
            throw UsageError(p.key, "missing required key '" + p.key + "' for " + cmd.name);
        } else {
            cfg.parameters.emplace_back(p.key, p.type == Type::text ? p.fallback : detail::canonical(p, p.fallback));
        }
    }
    cfg.seed = cfg.unsigned_integer("seed");
    cfg.out_path = given("out") ? s["out"].value : "";
    cfg.format = cmd.format;
    if (given("format")) {
        const std::string& f = s["format"].value;
        if (f == "csv") cfg.format = Format::csv;
        else if (f == "records") cfg.format = Format::records;
        else throw UsageError("format", "invalid value for 'format': '" + f + "' (expected csv or records)");
    }
    cfg.wall_time = given("wall_time") && detail::parse_bool("wall_time", s["wall_time"].value);
    return cfg;
}

// ----------------------------------------------------------------- report ---

using Cell = std::variant<std::monostate, std::string, double, long long, bool>;

struct Table {
    std::vector<std::string> columns;
    std::vector<std::vector<Cell>> rows;
    int exit_code = 0;

    void add(std::vector<Cell> row) {
        if (row.size() != columns.size()) throw std::logic_error("row width does not match the column count");
        rows.push_back(std::move(row));
    }
};

inline Cell count(long long v) { return Cell{v}; }

namespace detail {

inline std::string csv_cell(const Cell& c) {
    struct {
        std::string operator()(std::monostate) const { return ""; }
        std::string operator()(const std::string& s) const {
            if (s.find_first_of(",\"\n") == std::string::npos) return s;
            std::string q = "\"";
            for (char ch : s) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
            return q + "\"";
        }
        std::string operator()(double v) const { return format_number(v); }
        std::string operator()(long long v) const { return std::to_string(v); }
        std::string operator()(bool b) const { return b ? "true" : "false"; }
    } visit;
    return std::visit(visit, c);
}

inline nlohmann::ordered_json json_cell(const Cell& c) {
    struct {
        nlohmann::ordered_json operator()(std::monostate) const { return nullptr; }
        nlohmann::ordered_json operator()(const std::string& s) const { return s; }
        nlohmann::ordered_json operator()(double v) const {
            if (std::isnan(v)) return nullptr;
            if (std::isinf(v)) return format_number(v);
            return v;
        }
        nlohmann::ordered_json operator()(long long v) const { return v; }
        nlohmann::ordered_json operator()(bool b) const { return b; }
    } visit;
    return std::visit(visit, c);
}

inline std::string threads_env() {
    const char* env = std::getenv("SKLS_THREADS");
    return env == nullptr ? "unset" : env;
}

}  // namespace detail

/// Report text: CSV with '#' echo lines, or JSON lines (one header record, one record per row).
inline std::string render(const RunConfig& cfg, const Table& table, std::optional<double> wall_seconds = {}) {
    const Command& cmd = find_command(cfg.command);
    std::ostringstream out;
    if (cfg.format == Format::csv) {
        out << "# tool = " << kToolName << ' ' << kVersion << '\n';
        out << "# command = " << cfg.command << '\n';
        for (const auto& [k, v] : cfg.parameters) out << "# " << k << " = " << v << '\n';
        out << "# SKLS_THREADS = " << detail::threads_env() << '\n';
        if (wall_seconds) out << "# wall_time_s = " << format_number(*wall_seconds) << '\n';
        for (std::size_t i = 0; i < table.columns.size(); ++i) out << (i ? "," : "") << table.columns[i];
        out << '\n';
        for (const auto& row : table.rows) {
            for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << detail::csv_cell(row[i]);
            out << '\n';
        }
        return out.str();
    }
    nlohmann::ordered_json header;
    header["record"] = "header";
    header["tool"] = kToolName;
    header["version"] = kVersion;
    header["command"] = cfg.command;
    nlohmann::ordered_json input = nlohmann::ordered_json::object();
    for (const Param& p : cmd.params) {
        const std::string& v = cfg.raw(p.key);
        switch (p.type) {
            case Type::integer: input[p.key] = detail::parse_integral<long long>(p.key, v, ""); break;
            case Type::seed: input[p.key] = detail::parse_integral<std::uint64_t>(p.key, v, ""); break;
            case Type::real: input[p.key] = detail::parse_real(p.key, v); break;
            case Type::boolean: input[p.key] = v == "true"; break;
            case Type::text: input[p.key] = v; break;
        }
    }
    header["input"] = std::move(input);
    header["seed"] = cfg.seed;
    header["SKLS_THREADS"] = detail::threads_env();
    if (wall_seconds) header["wall_time_s"] = *wall_seconds;
    header["columns"] = table.columns;
    out << header.dump() << '\n';
    for (const auto& row : table.rows) {
        nlohmann::ordered_json rec;
        rec["record"] = "row";
        for (std::size_t i = 0; i < row.size(); ++i) rec[table.columns[i]] = detail::json_cell(row[i]);
        out << rec.dump() << '\n';
    }
    return out.str();
}

/// Writes to a sibling temporary file and renames it over path.
inline void write_atomic(const std::string& path, const std::string& text) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    fs::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
        f.write(text.data(), static_cast<std::streamsize>(text.size()));
        f.flush();
        if (!f) {
            std::error_code ignore;
            fs::remove(tmp, ignore);
            throw std::runtime_error("write to '" + tmp.string() + "' failed");
        }
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) {
        std::error_code ignore;
        fs::remove(tmp, ignore);
        throw std::runtime_error("cannot move report into '" + path + "': " + ec.message());
    }
}

// --------------------------------------------------------------- commands ---

inline ModelConfig model_config(const RunConfig& cfg) {
    ModelConfig c;
    c.tokens = cfg.integer("n");
    c.dim = cfg.integer("d");
    c.heads = cfg.integer("heads");
    c.layers = cfg.integer("layers");
    c.mlp_hidden = cfg.has("mlp_hidden") && cfg.integer("mlp_hidden") > 0 ? cfg.integer("mlp_hidden") : 4 * c.dim;
    if (cfg.has("activation")) {
        const std::string& a = cfg.text("activation");
        c.activation = a == "relu" ? Activation::relu : a == "identity" ? Activation::identity : Activation::gelu;
    }
    if (c.heads < 1 || c.dim % c.heads != 0)
        throw ShapeError("d=" + std::to_string(c.dim) + " is not divisible by heads=" + std::to_string(c.heads));
    const double scale = cfg.has("attention_scale") ? cfg.real("attention_scale") : 0.0;
    c.attention_scale = scale > 0.0 ? scale : ModelConfig::default_scale(c.dim, c.heads);
    if (cfg.has("skip")) c.use_skip = cfg.boolean("skip");
    if (cfg.has("use_mlp")) c.use_mlp = cfg.boolean("use_mlp");
    if (cfg.has("layer_norm")) c.layer_norm = cfg.boolean("layer_norm");
    return c;
}

/// InitSpec from alpha, beta, c, mlp_gain, trunc_std, trunc_bound and the scheme key
/// (`init` or `scheme`); proposed when neither is present.
inline InitSpec init_spec(const RunConfig& cfg) {
    InitSpec s;
    std::string scheme = "proposed";
    if (cfg.has("init")) scheme = cfg.text("init");
    if (cfg.has("scheme")) scheme = cfg.text("scheme");
    s.scheme = scheme == "default" ? InitScheme::default_normal : InitScheme::proposed;
    s.alpha = cfg.real("alpha");
    s.beta = cfg.real("beta");
    s.c = cfg.real("c");
    s.mlp_gain = cfg.real("mlp_gain");
    s.trunc_std = cfg.real("trunc_std");
    s.trunc_bound = cfg.real("trunc_bound");
    s.seed = cfg.seed;
    return s;
}

namespace commands_impl {

inline Table prop1(const RunConfig& cfg) {
    const Prop1Summary s = prop1_sweep(cfg.integer("n"), cfg.real("alpha"), cfg.real("beta"), cfg.real("temperature"),
                                       cfg.integer("trials"), cfg.seed);
    Table t{{"kind", "trial", "trial_seed", "kappa", "range", "margin"}};
    for (std::size_t i = 0; i < s.trials.size(); ++i) {
        const Prop1Trial& r = s.trials[i];
        t.add({std::string("trial"), count(static_cast<long long>(i)), std::to_string(r.seed), r.kappa, r.range, r.margin});
    }
    t.add({std::string("median"), {}, {}, s.median_kappa, s.median_range, s.median_margin});
    return t;
}

inline Table moments(const RunConfig& cfg) {
    const int d = cfg.integer("d");
    const double alpha = cfg.real("alpha"), beta = cfg.real("beta");
    const int trials = cfg.integer("trials");
    if (trials < 100) throw std::invalid_argument("moments: trials must be >= 100");
    const MomentReport r = gram_moments(d, alpha, beta, trials, cfg.seed);
    const MomentForms st = stated_moment_forms(d, alpha, beta);
    const MomentForms ex = exact_moment_forms(d, alpha, beta);
    Table t{{"quantity", "empirical", "stated", "exact", "standard_error"}};
    auto row = [&](const char* name, double emp, double s, double e, Cell se = {}) {
        t.add({std::string(name), emp, s, e, se});
    };
    row("mean_A_ii", r.a_diag.mean, st.a_diag_mean, ex.a_diag_mean);
    row("var_A_ii", r.a_diag.variance, st.a_diag_var, ex.a_diag_var);
    row("var_A_ij", r.a_off.variance, st.a_off_var, ex.a_off_var);
    row("var_B_ii", r.b_diag.variance, st.b_diag_var, ex.b_diag_var);
    row("var_B_ij", r.b_off.variance, st.b_off_var, ex.b_off_var);
    row("mean_C_ii", r.c_diag.mean, st.c_diag_mean, ex.c_diag_mean);
    row("var_C_ii", r.c_diag.variance, st.c_diag_var, ex.c_diag_var);
    row("var_C_ij", r.c_off.variance, st.c_off_var, ex.c_off_var);
    row("mean_gamma", r.gamma.mean, st.gamma_mean, ex.gamma_mean, r.gamma_standard_error());
    row("var_gamma", r.gamma.variance, st.gamma_var, ex.gamma_var);
    return t;
}

inline Table jacobian_check(const RunConfig& cfg) {
    JacobianCheckOptions opt;
    opt.tokens = cfg.integer("n");
    opt.dim = cfg.integer("d");
    opt.heads = cfg.integer("heads");
    opt.layers = cfg.integer("layers");
    opt.seeds = cfg.integer("seeds");
    opt.tolerance = cfg.real("tolerance");
    opt.randomize_shapes = cfg.boolean("randomize_shapes");
    opt.seed = cfg.seed;
    if (opt.seeds < 1) throw std::invalid_argument("jacobian-check: seeds must be >= 1");
    if (opt.heads < 1 || opt.dim % opt.heads != 0)
        throw ShapeError("d=" + std::to_string(opt.dim) + " is not divisible by heads=" + std::to_string(opt.heads));
    const auto results = run_jacobian_checks(opt);
    Table t{{"check", "instance", "n", "d", "heads", "rel_error", "passed"}};
    bool all = true;
    double worst = 0.0;
    for (const JacobianCheckResult& r : results) {
        t.add({r.check, count(r.instance), count(r.tokens), count(r.dim), count(r.heads), r.rel_error, r.passed});
        all = all && r.passed;
        worst = std::max(worst, r.rel_error);
    }
    t.add({std::string("all"), {}, {}, {}, {}, worst, all});
    t.exit_code = all ? 0 : 1;
    return t;
}

inline Table ksplit(const RunConfig& cfg) {
    ModelConfig c = model_config(cfg);
    c.layer_norm = false;
    skipless::detail::check_budget_nd(c.tokens, c.dim);
    const NetworkParams net = init_network(c, init_spec(cfg));
    const Matrix x = gaussian_batch(1, c.tokens, c.dim, cfg.seed, cfg.real("input_std"))[0];
    const ForwardTrace trace = network_forward(x, net, c);
    const bool per_head = cfg.boolean("per_head");
    Table t{{"layer", "head", "e_norm", "b_min", "b_max", "kappa_b", "kappa_k", "dominance"}};
    for (int l = 0; l < c.layers; ++l) {
        std::vector<int> heads;
        if (per_head)
            for (int h = 0; h < c.heads; ++h) heads.push_back(h);
        else
            heads.push_back(-1);
        for (int h : heads) {
            const PerturbationReport r = perturbation_split(trace, net, c, l, h);
            t.add({count(l), h < 0 ? Cell{std::string("all")} : count(h), r.e_norm, r.b_min, r.b_max, r.kappa_b,
                   r.kappa_k, r.dominance});
        }
    }
    return t;
}

inline Table concat_bound(const RunConfig& cfg) {
    const int trials = cfg.integer("trials");
    if (trials < 1) throw std::invalid_argument("concat-bound: trials must be >= 1");
    const ConcatTrialSummary s = concat_bound_trials(trials, cfg.integer("rows"), cfg.integer("cols"), cfg.seed);
    Table t{{"kind", "trial", "rho", "tau_bal", "s_max", "s_min", "kappa_max", "bound", "actual", "ratio",
             "hypothesis_satisfied", "attempts", "violations"}};
    for (std::size_t i = 0; i < s.reports.size(); ++i) {
        const ConcatReport& r = s.reports[i];
        t.add({std::string("trial"), count(static_cast<long long>(i)), r.rho, r.tau_bal, r.s_max, r.s_min, r.kappa_max,
               r.bound, r.actual, r.actual / r.bound, r.hypothesis_satisfied, {}, {}});
    }
    t.add({std::string("summary"), {}, {}, {}, {}, {}, {}, {}, {}, s.worst_ratio, {}, count(s.attempts),
           count(s.violations)});
    return t;
}

inline Table profile(const RunConfig& cfg) {
    ModelConfig c = model_config(cfg);
    c.layer_norm = false;
    const auto rows = layer_condition_profile(c, init_spec(cfg), cfg.integer("batch"), cfg.seed,
                                              cfg.boolean("param_jacobian"), cfg.real("input_std"));
    Table t{{"regime", "layer", "kappa_k", "kappa_k_plus_i", "kappa_khat", "kappa_j", "dominance"}};
    for (const LayerConditionRow& r : rows)
        t.add({r.regime, count(r.layer), r.kappa_k, r.kappa_k_plus_i, r.kappa_khat, r.kappa_j, r.dominance});
    return t;
}

inline Table train(const RunConfig& cfg) {
    TrainConfig tc;
    tc.model = model_config(cfg);
    tc.init = init_spec(cfg);
    tc.optimizer.kind =
        cfg.text("optimizer") == "sgd_momentum" ? OptimizerKind::sgd_momentum : OptimizerKind::adam_decoupled;
    tc.optimizer.lr = cfg.real("lr");
    tc.optimizer.weight_decay = cfg.real("weight_decay");
    tc.optimizer.momentum = cfg.real("momentum");
    tc.optimizer.beta1 = cfg.real("beta1");
    tc.optimizer.beta2 = cfg.real("beta2");
    tc.optimizer.eps = cfg.real("eps");
    tc.steps = cfg.integer("steps");
    tc.batch_size = cfg.integer("batch_size");
    tc.log_every = cfg.integer("log_every");
    tc.kappa_probe_every = cfg.integer("kappa_probe_every");
    tc.seed = cfg.seed;
    tc.validate();

    const Dataset ds = cfg.text("data").empty()
                           ? synth_task(tc.model.tokens, tc.model.dim, cfg.integer("classes"), cfg.integer("samples"),
                                        cfg.real("noise"), cfg.unsigned_integer("data_seed"))
                                 .data
                           : load_tensor_file(cfg.text("data"));
    const TrainLog log = skipless::train(ds, tc);

    Table t{{"kind", "step", "loss", "layer", "kappa_k", "diverged", "divergence_step", "digest"}};
    const int done = static_cast<int>(log.losses.size());
    for (int s = 0; s < done; ++s)
        if (s % tc.log_every == 0 || s == done - 1)
            t.add({std::string("step"), count(s), log.losses[s], {}, {}, {}, {}, {}});
    for (const KappaProbe& p : log.probes)
        for (std::size_t l = 0; l < p.kappa_k.size(); ++l)
            t.add({std::string("probe"), count(p.step), {}, count(static_cast<long long>(l)), p.kappa_k[l], {}, {}, {}});
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(log.digest));
    t.add({std::string("final"), count(done), log.final_loss, {}, {}, log.diverged,
           log.diverged ? count(log.divergence_step) : Cell{}, std::string(hex)});
    return t;
}

inline Table init_report(const RunConfig& cfg) {
    ModelConfig c;
    c.tokens = 1;
    c.dim = cfg.integer("d");
    c.heads = cfg.integer("heads");
    c.layers = cfg.integer("layers");
    c.mlp_hidden = cfg.integer("mlp_hidden") > 0 ? cfg.integer("mlp_hidden") : 4 * c.dim;
    const InitSpec spec = init_spec(cfg);
    const NetworkParams net = init_network(c, spec);
    const int d = c.dim, dh = c.head_dim();
    Table t{{"kind", "layer", "head", "kappa", "s_min", "s_max", "qk_rel_error", "entry_std", "entry_max_abs"}};
    for (int l = 0; l < c.layers; ++l) {
        const BlockParams& p = net.blocks[l];
        const Vector s = linalg::singular_values(p.wv * p.wo);
        t.add({std::string("value_output"), count(l), std::string("all"), linalg::condition_from_values(s).value,
               s(s.size() - 1), s(0), {}, {}, {}});
        for (int h = 0; h < c.heads; ++h) {
            const Matrix q = p.wq.middleCols(h * dh, dh);
            const Matrix k = p.wk.middleCols(h * dh, dh);
            const Matrix prod = q * k.transpose();
            const Vector sq = linalg::singular_values(prod);
            Cell rel;
            if (spec.scheme == InitScheme::proposed) {
                const std::uint64_t seed = derive_seed(spec.seed, {static_cast<std::uint64_t>(l),
                                                                   skipless::detail::kMimetic,
                                                                   static_cast<std::uint64_t>(h)});
                const Matrix target = mimetic_qk(d, dh, spec.alpha, spec.beta, seed).target;
                rel = (prod - target).norm() / target.norm();
            }
            const double mean = q.mean();
            const double sd = std::sqrt((q.array() - mean).square().sum() / static_cast<double>(q.size()));
            t.add({std::string("query_key"), count(l), count(h), linalg::condition_from_values(sq).value,
                   sq(sq.size() - 1), sq(0), rel, sd, q.cwiseAbs().maxCoeff()});
        }
    }
    return t;
}

}  // namespace commands_impl

/// Runs the command and builds its table without writing anything.
inline Table execute(const RunConfig& cfg) {
    const std::string& c = cfg.command;
    if (c == "prop1") return commands_impl::prop1(cfg);
    if (c == "moments") return commands_impl::moments(cfg);
    if (c == "jacobian-check") return commands_impl::jacobian_check(cfg);
    if (c == "ksplit") return commands_impl::ksplit(cfg);
    if (c == "concat-bound") return commands_impl::concat_bound(cfg);
    if (c == "profile") return commands_impl::profile(cfg);
    if (c == "train") return commands_impl::train(cfg);
    if (c == "init-report") return commands_impl::init_report(cfg);
    throw UsageError("command", "unknown command '" + c + "'");
}

/// 0 on success, 1 on a domain or I/O error (or a failed jacobian-check gate), 2 on a usage error.
inline int run(const RunConfig& cfg, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    try {
        thread_count();
    } catch (const std::invalid_argument& e) {
        err << kToolName << ": usage error: " << e.what() << '\n';
        return 2;
    }
    try {
        const auto start = std::chrono::steady_clock::now();
        const Table table = execute(cfg);
        std::optional<double> wall;
        if (cfg.wall_time)
            wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const std::string text = render(cfg, table, wall);
        if (cfg.out_path.empty()) {
            out << text;
            out.flush();
        } else {
            write_atomic(cfg.out_path, text);
        }
        if (table.exit_code != 0) err << kToolName << ": " << cfg.command << " reported failures\n";
        return table.exit_code;
    } catch (const UsageError& e) {
        err << kToolName << ": usage error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << kToolName << ": error: " << e.what() << '\n';
        return 1;
    }
}

inline int main_entry(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    std::vector<std::string> args(argv + 1, argv + argc);
    RunConfig cfg;
    try {
        cfg = parse_config(args);
    } catch (const InfoRequest& info) {
        out << info.what();
        return 0;
    } catch (const UsageError& e) {
        err << kToolName << ": usage error: " << e.what() << '\n';
        return 2;
    }
    return run(cfg, out, err);
}

}  // namespace skipless::cli
