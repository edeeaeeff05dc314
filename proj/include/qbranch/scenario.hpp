// Scenario-driven front end: parse a JSON scenario, run the named experiment,
// emit CSV/JSON artifacts atomically and report CI-friendly exit codes.
#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "core.hpp"
#include "dynamics.hpp"
#include "echo.hpp"
#include "master.hpp"
#include "measure.hpp"
#include "model.hpp"
#include "robservable.hpp"
#include "rng.hpp"
#include "tree.hpp"
#include "version.hpp"

namespace qbranch {

using Json = nlohmann::json;

/// Schema/usage problems map to exit code 2.
struct SchemaError : std::runtime_error {
    explicit SchemaError(const std::string& what) : std::runtime_error(what) {}
};

struct RunOptions {
    std::optional<std::string> out_dir;
    std::optional<std::uint64_t> seed;
    bool dry_run = false;
    std::optional<double> eps_x;
    std::optional<std::size_t> max_paths;
    int threads = 1;
};

struct ExperimentInfo {
    std::string name;
    std::string description;
};

/// The eight experiment kinds, in stable order.
inline const std::vector<ExperimentInfo>& list_experiments() {
    static const std::vector<ExperimentInfo> table{
        {"ntc", "evaluate the non-transition condition of a family over a window"},
        {"robs", "certify a projector family as an R-observable over a product-state ensemble"},
        {"echo", "Loschmidt-echo series with perturbative-border and rate analysis"},
        {"tree", "grow a branching tree and record paths, probabilities and entropy"},
        {"ivr", "initial-vector-restriction check with coarse-grained variants"},
        {"measure", "premeasurement + split measurement scheme with Born-rule comparison"},
        {"master", "ideal-branching transition rates and master-equation iteration"},
        {"isolatable", "H_I residual check against the uncoupled closed form"},
    };
    return table;
}

namespace detail_scenario {

inline double as_number(const Json& v, const std::string& field) {
    if (v.is_number()) return v.get<double>();
    if (v.is_string()) {
        try {
            std::size_t used = 0;
            double parsed = std::stod(v.get<std::string>(), &used);
            if (used == v.get<std::string>().size()) return parsed;
        } catch (...) {
        }
    }
    throw SchemaError("field '" + field + "' must be a number (or decimal string)");
}

inline const Json& require(const Json& obj, const std::string& field) {
    auto it = obj.find(field);
    if (it == obj.end()) throw SchemaError("missing required field '" + field + "'");
    return *it;
}

inline double number_at(const Json& obj, const std::string& field) {
    return as_number(require(obj, field), field);
}

inline double number_or(const Json& obj, const std::string& field, double fallback) {
    auto it = obj.find(field);
    return it == obj.end() ? fallback : as_number(*it, field);
}

inline std::uint64_t seed_or(const Json& obj, const std::string& field, std::uint64_t fallback) {
    auto it = obj.find(field);
    if (it == obj.end()) return fallback;
    if (!it->is_number_integer() && !it->is_number_unsigned())
        throw SchemaError("field '" + field + "' must be an integer seed");
    return it->get<std::uint64_t>();
}

inline std::string format_number(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.12g", x);
    return buf;
}

inline Window window_from(const Json& v, const std::string& field) {
    if (!v.is_array() || v.size() != 2)
        throw SchemaError("field '" + field + "' must be [begin, end]");
    return {as_number(v[0], field), as_number(v[1], field)};
}

}  // namespace detail_scenario

/// Parsed scenario: model (possibly piecewise), tolerances, grid, experiment.
class Scenario {
  public:
    static Scenario parse(const Json& doc, const RunOptions& opts) {
        using namespace detail_scenario;
        if (!doc.is_object()) throw SchemaError("scenario must be a JSON object");
        if (require(doc, "schema").get<std::string>() != "1")
            throw SchemaError("unsupported schema version (expected \"1\")");
        Scenario s;
        s.doc_ = doc;
        s.name_ = doc.value("name", std::string("unnamed"));
        s.experiment_ = require(doc, "experiment").get<std::string>();
        bool known = false;
        for (const auto& info : list_experiments()) known = known || info.name == s.experiment_;
        if (!known) throw SchemaError("unknown experiment '" + s.experiment_ + "'");
        s.seed_ = opts.seed.value_or(seed_or(doc, "seed", 0));
        if (doc.find("seed") == doc.end() && !opts.seed)
            throw SchemaError("missing required field 'seed' (seeds must be explicit)");

        s.tolerance_ = Tolerance{};
        if (auto it = doc.find("tolerance"); it != doc.end()) {
            double eps = number_or(*it, "eps_x", s.tolerance_.eps_x);
            s.tolerance_ = Tolerance::with_eps(eps);
            s.tolerance_.degeneracy_tol = number_or(*it, "degeneracy_tol", s.tolerance_.degeneracy_tol);
            if (it->contains("k_accuracy")) s.tolerance_.k_accuracy = number_at(*it, "k_accuracy");
        }
        if (opts.eps_x) s.tolerance_ = Tolerance::with_eps(*opts.eps_x);
        s.max_paths_ = opts.max_paths.value_or(4096);

        s.model_ = parse_model(require(doc, "model"), s.seed_);
        if (auto it = doc.find("grid"); it != doc.end()) {
            s.grid_ = TimeGrid(number_or(*it, "t0", 0.0), number_at(*it, "dt"),
                               static_cast<Index>(number_at(*it, "steps")));
        }
        s.params_ = doc.value("params", Json::object());
        s.expect_ = doc.value("expect", Json::object());
        s.output_dir_ = opts.out_dir.value_or(doc.value("output_dir", std::string("out")));
        return s;
    }

    static TotalModel parse_model(const Json& m, std::uint64_t master_seed) {
        using namespace detail_scenario;
        if (!m.is_object()) throw SchemaError("'model' must be an object");
        const Json& levels_json = require(m, "apparatus_levels");
        if (!levels_json.is_array() || levels_json.size() < 2)
            throw SchemaError("'model.apparatus_levels' must list at least two energies");
        std::vector<double> levels;
        for (const auto& v : levels_json) levels.push_back(as_number(v, "apparatus_levels"));

        const Json& env = require(m, "environment");
        EnsembleSpec spec;
        std::string kind = require(env, "kind").get<std::string>();
        if (kind == "gue")
            spec.kind = EnsembleKind::GUE;
        else if (kind == "goe")
            spec.kind = EnsembleKind::GOE;
        else if (kind == "diagonal_banded")
            spec.kind = EnsembleKind::DiagonalBanded;
        else
            throw SchemaError("'model.environment.kind' must be gue|goe|diagonal_banded");
        spec.dim = static_cast<Index>(number_at(env, "dim"));
        spec.energy_scale = number_at(env, "energy_scale");
        spec.seed = seed_or(env, "seed", master_seed ^ 0xe57ull);

        Index n = static_cast<Index>(levels.size());
        double strength = 0.0;
        std::vector<Mat> ops;
        if (auto it = m.find("coupling"); it != m.end()) {
            strength = number_or(*it, "strength", 0.0);
            std::string ckind = it->value("kind", std::string("random"));
            std::uint64_t cseed = seed_or(*it, "seed", master_seed ^ 0xc0ull);
            double diag_weight = number_or(*it, "diag_weight", 0.0);
            if (ckind == "none" || strength == 0.0) {
                strength = 0.0;
            } else if (ckind == "random") {
                ops = random_coupling_ops(n, spec.dim, cseed, diag_weight);
            } else if (ckind == "proportional") {
                // B_mu = mu * B: constant-difference structure.
                ops = random_coupling_ops(1, spec.dim, cseed, diag_weight);
                Mat base = ops[0];
                ops.clear();
                for (Index mu = 0; mu < n; ++mu) ops.push_back(static_cast<double>(mu) * base);
            } else {
                throw SchemaError("'model.coupling.kind' must be none|random|proportional");
            }
        }
        return build_nlevel_model(levels, spec, ops, strength);
    }

    ProjectorFamily parse_family(const Json& v) const {
        using namespace detail_scenario;
        Index n = model_.apparatus_dim();
        if (v.is_string()) {
            std::string kind = v.get<std::string>();
            if (kind == "canonical") return canonical_family(n);
            if (kind == "eigen")
                return eigenprojector_family(model_.h_r(), tolerance_.degeneracy_tol);
            throw SchemaError("family must be canonical|eigen|{groups:[[..]..]}");
        }
        if (v.is_object() && v.contains("groups")) {
            std::vector<std::vector<Index>> groups;
            for (const auto& g : v["groups"]) {
                std::vector<Index> group;
                for (const auto& i : g) group.push_back(static_cast<Index>(i.get<int>()));
                groups.push_back(group);
            }
            return family_from_basis_groups(Mat::Identity(n, n), groups);
        }
        throw SchemaError("family must be canonical|eigen|{groups:[[..]..]}");
    }

    /// Product initial state from {"apparatus": ..., "environment": ...}.
    StateVector parse_initial(const Json& v) const {
        using namespace detail_scenario;
        Index n = model_.apparatus_dim();
        Index env_dim = model_.environment_dim();
        Vec app(n);
        const Json& a = require(v, "apparatus");
        std::string akind = require(a, "kind").get<std::string>();
        if (akind == "basis") {
            app.setZero();
            app(static_cast<Index>(number_at(a, "index"))) = 1.0;
        } else if (akind == "superposition") {
            const Json& amps = require(a, "amplitudes");
            if (static_cast<Index>(amps.size()) != n)
                throw SchemaError("apparatus amplitudes must match the level count");
            for (Index k = 0; k < n; ++k) {
                const Json& entry = amps[static_cast<std::size_t>(k)];
                if (entry.is_array() && entry.size() == 2)
                    app(k) = Complex(as_number(entry[0], "amplitudes"), as_number(entry[1], "amplitudes"));
                else
                    app(k) = as_number(entry, "amplitudes");
            }
            app /= app.norm();
        } else if (akind == "random") {
            Rng rng(seed_or(a, "seed", seed_ ^ 0xa99ull));
            app = random_unit_vector(n, rng);
        } else {
            throw SchemaError("apparatus.kind must be basis|superposition|random");
        }

        Vec env(env_dim);
        const Json& e = require(v, "environment");
        std::string ekind = require(e, "kind").get<std::string>();
        if (ekind == "random") {
            Rng rng(seed_or(e, "seed", seed_ ^ 0xe1ull));
            env = random_unit_vector(env_dim, rng);
        } else if (ekind == "thermal") {
            env = thermal_like_env_state(model_, number_or(e, "beta", -1.0));
        } else if (ekind == "basis") {
            env.setZero();
            env(static_cast<Index>(number_at(e, "index"))) = 1.0;
        } else {
            throw SchemaError("environment.kind must be random|thermal|basis");
        }
        return product_state({SpaceShape({n}), app}, {SpaceShape({env_dim}), env});
    }

    std::vector<SplitSpec> parse_schedule(const Json& v) const {
        using namespace detail_scenario;
        if (!v.is_array()) throw SchemaError("schedule must be an array of splits");
        std::vector<SplitSpec> schedule;
        for (const auto& item : v) {
            SplitSpec split;
            split.window = window_from(require(item, "window"), "window");
            split.family = parse_family(require(item, "family"));
            split.tau_d = number_or(item, "tau_d", 0.0);
            if (item.contains("split_time")) split.time_override = number_at(item, "split_time");
            schedule.push_back(std::move(split));
        }
        return schedule;
    }

    /// Optional piecewise segments: [{"kind":"model"|"reversed"|"mix", "until": t, ...}].
    std::shared_ptr<const PropagationContext> propagation_context() const {
        using namespace detail_scenario;
        auto it = doc_.find("segments");
        if (it == doc_.end()) return std::make_shared<ModelContext>(model_);
        if (!it->is_array() || it->empty()) throw SchemaError("'segments' must be a non-empty array");
        std::vector<std::pair<double, TotalModel>> segments;
        double start = 0.0;
        Index n = model_.apparatus_dim(), env_dim = model_.environment_dim();
        for (const auto& seg : *it) {
            std::string kind = require(seg, "kind").get<std::string>();
            double duration = number_at(seg, "duration");
            if (duration <= 0.0) throw SchemaError("segment duration must be > 0");
            if (kind == "model") {
                segments.emplace_back(start, model_);
            } else if (kind == "reversed") {
                segments.emplace_back(start, TotalModel(Mat(-model_.h_r()), Mat(-model_.h_e()),
                                                        Mat(-model_.h_i())));
            } else if (kind == "mix") {
                Index i = static_cast<Index>(number_at(seg, "level_a"));
                Index j = static_cast<Index>(number_at(seg, "level_b"));
                double angle = number_at(seg, "angle");
                Mat h_r = Mat::Zero(n, n);
                h_r(i, j) = angle / duration;
                h_r(j, i) = angle / duration;
                segments.emplace_back(start, TotalModel(std::move(h_r), Mat::Zero(env_dim, env_dim),
                                                        Mat::Zero(n * env_dim, n * env_dim)));
            } else {
                throw SchemaError("segment kind must be model|reversed|mix");
            }
            start += duration;
        }
        return std::make_shared<PiecewiseContext>(model_.shape(), std::move(segments));
    }

    const std::string& name() const { return name_; }
    const std::string& experiment() const { return experiment_; }
    const TotalModel& model() const { return model_; }
    const Tolerance& tolerance() const { return tolerance_; }
    const Json& params() const { return params_; }
    const Json& expect() const { return expect_; }
    const std::optional<TimeGrid>& grid() const { return grid_; }
    TimeGrid require_grid() const {
        if (!grid_) throw SchemaError("missing required field 'grid'");
        return *grid_;
    }
    std::uint64_t seed() const { return seed_; }
    std::size_t max_paths() const { return max_paths_; }
    const std::string& output_dir() const { return output_dir_; }

  private:
    Json doc_;
    std::string name_;
    std::string experiment_;
    std::uint64_t seed_ = 0;
    Tolerance tolerance_;
    TotalModel model_;
    std::optional<TimeGrid> grid_;
    Json params_;
    Json expect_;
    std::size_t max_paths_ = 4096;
    std::string output_dir_;
};

/// Atomic artifact sink (temp file + rename); records the manifest file list.
class ArtifactWriter {
  public:
    ArtifactWriter(std::string dir, bool dry_run) : dir_(std::move(dir)), dry_run_(dry_run) {
        if (!dry_run_) std::filesystem::create_directories(dir_);
    }

    void write_text(const std::string& name, const std::string& content) {
        files_.push_back(name);
        if (dry_run_) return;
        std::filesystem::path target = std::filesystem::path(dir_) / name;
        std::filesystem::path tmp = target;
        tmp += ".tmp";
        {
            std::ofstream out(tmp, std::ios::binary);
            if (!out) throw std::runtime_error("cannot open " + tmp.string());
            out << content;
        }
        std::filesystem::rename(tmp, target);
    }

    void write_json(const std::string& name, const Json& doc) { write_text(name, doc.dump(2) + "\n"); }

    /// CSV: comma separators, header row, LF endings, %.12g numbers.
    void write_csv(const std::string& name, const std::vector<std::string>& header,
                   const std::vector<std::vector<double>>& rows) {
        std::ostringstream out;
        for (std::size_t k = 0; k < header.size(); ++k) {
            if (k) out << ',';
            out << header[k];
        }
        out << '\n';
        for (const auto& row : rows) {
            for (std::size_t k = 0; k < row.size(); ++k) {
                if (k) out << ',';
                out << detail_scenario::format_number(row[k]);
            }
            out << '\n';
        }
        write_text(name, out.str());
    }

    const std::vector<std::string>& files() const { return files_; }
    bool dry_run() const { return dry_run_; }

  private:
    std::string dir_;
    bool dry_run_;
    std::vector<std::string> files_;
};

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

namespace detail_scenario {

inline bool expect_bool(const Json& expect, const std::string& field, bool fallback) {
    auto it = expect.find(field);
    return it == expect.end() ? fallback : it->get<bool>();
}

inline Json family_to_json(const ProjectorFamily& family) {
    Json out = Json::array();
    for (std::size_t k = 0; k < family.size(); ++k) {
        Json entry;
        entry["label"] = family.labels[k];
        entry["rank"] = static_cast<int>(family.rank(k));
        Json rows = Json::array();
        for (Index i = 0; i < family.projectors[k].rows(); ++i) {
            Json row = Json::array();
            for (Index j = 0; j < family.projectors[k].cols(); ++j) {
                row.push_back(Json::array({family.projectors[k](i, j).real(),
                                           family.projectors[k](i, j).imag()}));
            }
            rows.push_back(row);
        }
        entry["matrix"] = rows;
        out.push_back(entry);
    }
    return out;
}

// ---- experiment runners ----------------------------------------------------

inline std::vector<CheckResult> run_ntc(const Scenario& s, ArtifactWriter& out) {
    const Json& p = s.params();
    ProjectorFamily family = s.parse_family(require(p, "family"));
    StateVector psi0 = s.parse_initial(require(p, "initial"));
    Window window = window_from(require(p, "window"), "window");
    Index samples = static_cast<Index>(number_or(p, "samples", 48));
    NtcReport report = ntc_evaluate(s.model(), psi0, family, window, s.tolerance().eps_x, samples);

    Json j;
    j["verdict"] = report.verdict;
    j["max_leakage"] = report.max_leakage;
    j["eps_x"] = report.eps_x;
    j["window"] = {report.window.begin, report.window.end};
    j["grid_resolves_hamiltonian"] = report.grid_resolves_hamiltonian;
    j["family"] = family_to_json(family);
    out.write_json("ntc_report.json", j);

    std::vector<std::string> header{"t"};
    for (int label : family.labels) header.push_back("leakage_" + std::to_string(label));
    std::vector<std::vector<double>> rows;
    for (std::size_t k = 0; k < report.times.size(); ++k) {
        std::vector<double> row{report.times[k]};
        for (const auto& curve : report.leakage) row.push_back(curve[k]);
        rows.push_back(std::move(row));
    }
    out.write_csv("ntc_leakage.csv", header, rows);

    bool expected = expect_bool(s.expect(), "verdict", true);
    return {{"ntc_verdict", report.verdict == expected,
             "max leakage " + format_number(report.max_leakage)}};
}

inline std::vector<CheckResult> run_robs(const Scenario& s, ArtifactWriter& out) {
    const Json& p = s.params();
    ProjectorFamily family = s.parse_family(require(p, "family"));
    Window window = window_from(require(p, "window"), "window");
    Index samples = static_cast<Index>(number_or(p, "samples", 48));

    const Json& ensemble_spec = require(p, "ensemble");
    std::size_t random_count = static_cast<std::size_t>(number_or(ensemble_spec, "random_count", 16));
    std::uint64_t seed = seed_or(ensemble_spec, "seed", s.seed() ^ 0xabcull);
    std::string env_kind = ensemble_spec.value("environment", std::string("thermal"));
    Vec phi;
    if (env_kind == "thermal") {
        phi = thermal_like_env_state(s.model());
    } else if (env_kind == "random") {
        Rng rng(seed ^ 0x11ull);
        phi = random_unit_vector(s.model().environment_dim(), rng);
    } else {
        throw SchemaError("ensemble.environment must be thermal|random");
    }
    std::vector<StateVector> ensemble =
        default_initial_ensemble(s.model(), family, phi, random_count, seed);

    RCertificate cert = certify_r_observable(s.model(), family, ensemble, window, s.tolerance(), samples);

    Json j;
    j["verdict"] = cert.verdict;
    j["tau_d"] = cert.tau_d;
    j["ensemble_size"] = cert.ensemble_size;
    Json per_state = Json::array();
    for (std::size_t k = 0; k < cert.ensemble_size; ++k) {
        per_state.push_back(Json{{"pass", static_cast<bool>(cert.pass_per_state[k])},
                                 {"tau_d", cert.tau_d_per_state[k]}});
    }
    j["states"] = per_state;
    j["family"] = family_to_json(family);
    out.write_json("rcertificate.json", j);

    std::vector<std::vector<double>> rows;
    for (std::size_t k = 0; k < cert.worst_curve.times.size(); ++k)
        rows.push_back({cert.worst_curve.times[k], cert.worst_curve.offblock[k]});
    out.write_csv("worst_offblock.csv", {"t", "offblock"}, rows);

    bool expected = expect_bool(s.expect(), "certified", true);
    return {{"r_observable_certified", cert.verdict == expected,
             "tau_d " + format_number(cert.tau_d)}};
}

inline std::vector<CheckResult> run_echo(const Scenario& s, ArtifactWriter& out) {
    const Json& p = s.params();
    Index mu = static_cast<Index>(number_or(p, "mu", 0));
    Index nu = static_cast<Index>(number_or(p, "nu", 1));
    TimeGrid grid = s.require_grid();
    Vec phi;
    std::string env_kind = p.value("environment", std::string("random"));
    if (env_kind == "thermal") {
        phi = thermal_like_env_state(s.model());
    } else {
        Rng rng(seed_or(p, "environment_seed", s.seed() ^ 0x0e11ull));
        phi = random_unit_vector(s.model().environment_dim(), rng);
    }
    EchoSeries series = dephasing_factor(s.model(), mu, nu, phi, grid);

    std::vector<std::vector<double>> rows;
    for (std::size_t k = 0; k < series.size(); ++k)
        rows.push_back({series.times[k], series.amplitude[k].real(), series.amplitude[k].imag(),
                        series.magnitude(k), series.echo(k)});
    out.write_csv("echo_series.csv", {"t", "re_m", "im_m", "abs_m", "M"}, rows);

    std::vector<CheckResult> checks;
    PerturbationStats stats = perturbation_stats(s.model(), mu, nu);
    EchoReport report = rate_analysis(stats, series, s.tolerance());
    Json j;
    j["epsilon"] = stats.epsilon;
    j["delta"] = stats.delta;
    j["sigma_v"] = stats.sigma_v;
    j["v_nd_sq"] = stats.v_nd_sq;
    j["eps_p"] = report.eps_p;
    j["regime"] = to_string(report.regime);
    j["fitted_rate"] = report.fitted_rate;
    j["predicted_rate"] = report.predicted_rate;
    j["predicted_tau_d"] = report.predicted_tau_d;
    j["saturation_level"] = report.saturation_level;
    j["fit_window"] = {report.fit_t_begin, report.fit_t_end};
    j["fit_points"] = report.fit_points;
    j["fit_ok"] = report.fit_ok;
    j["note"] = report.note;
    out.write_json("echo_report.json", j);

    checks.push_back({"echo_fit", report.fit_ok, report.note});
    if (s.expect().contains("regime")) {
        std::string expected = s.expect()["regime"].get<std::string>();
        checks.push_back({"echo_regime", to_string(report.regime) == expected,
                          "got " + to_string(report.regime)});
    }
    if (s.expect().contains("rate_within")) {
        double band = as_number(s.expect()["rate_within"], "rate_within");
        bool ok = report.fit_ok && report.predicted_rate > 0.0 &&
                  std::abs(report.fitted_rate - report.predicted_rate) <= band * report.predicted_rate;
        checks.push_back({"echo_rate_within", ok,
                          "fitted " + format_number(report.fitted_rate) + " vs predicted " +
                              format_number(report.predicted_rate)});
    }
    return checks;
}

inline std::vector<CheckResult> run_isolatable(const Scenario& s, ArtifactWriter& out) {
    const Json& p = s.params();
    StateVector psi0 = s.parse_initial(require(p, "initial"));
    Window window = window_from(require(p, "window"), "window");
    Index samples = static_cast<Index>(number_or(p, "samples", 64));
    IsolatableReport report = isolatable_check(s.model(), psi0, window, s.tolerance().eps_x, samples);

    Json j;
    j["isolated"] = report.isolated;
    j["max_residual"] = report.max_residual;
    j["max_prediction_error"] = report.max_prediction_error;
    j["eps_x"] = report.eps_x;
    out.write_json("isolatable.json", j);

    std::vector<std::vector<double>> rows;
    for (std::size_t k = 0; k < report.times.size(); ++k)
        rows.push_back({report.times[k], report.residual[k], report.max_offdiagonal[k]});
    out.write_csv("isolatable_curve.csv", {"t", "residual", "max_offdiagonal"}, rows);

    bool expected = expect_bool(s.expect(), "isolated", true);
    return {{"isolatable", report.isolated == expected,
             "max residual " + format_number(report.max_residual)}};
}

inline std::vector<CheckResult> run_tree(const Scenario& s, ArtifactWriter& out) {
    const Json& p = s.params();
    StateVector psi0 = s.parse_initial(require(p, "initial"));
    std::vector<SplitSpec> schedule = s.parse_schedule(require(p, "schedule"));
    GrowthOptions opts;
    opts.max_paths = s.max_paths();
    Tree tree = grow_tree(s.propagation_context(), psi0, 0.0, schedule, s.tolerance(), opts);

    std::vector<double> queries;
    if (auto it = p.find("queries"); it != p.end())
        for (const auto& q : *it) queries.push_back(as_number(q, "queries"));
    if (queries.empty() && !tree.events().empty()) queries.push_back(tree.events().back().time + 1.0);
    if (queries.empty()) queries.push_back(1.0);

    Json manifest;
    manifest["events"] = Json::array();
    for (const auto& event : tree.events()) {
        manifest["events"].push_back(Json{{"time", event.time},
                                          {"window", {event.spec.window.begin, event.spec.window.end}},
                                          {"tau_d", event.spec.tau_d},
                                          {"applied_to_all", event.applied_to_all}});
    }
    manifest["diagnostics"] = Json::array();
    for (const auto& diag : tree.diagnostics()) {
        manifest["diagnostics"].push_back(Json{{"event", diag.event_index},
                                               {"path", diag.path_labels},
                                               {"reason", diag.reason},
                                               {"max_leakage", diag.max_leakage}});
    }

    std::vector<CheckResult> checks;
    double worst_residual = 0.0, worst_prob = 0.0;
    Json query_log = Json::array();
    std::vector<std::vector<double>> component_rows;
    for (double t : queries) {
        double residual = tree.decomposition_residual(t);
        double prob = std::abs(tree.probability_sum(t) - 1.0);
        worst_residual = std::max(worst_residual, residual);
        worst_prob = std::max(worst_prob, prob);
        Json paths = Json::array();
        for (const PathView& path : tree.paths_at(t)) {
            paths.push_back(Json{{"labels", path.labels},
                                 {"split_times", path.split_times},
                                 {"probability", path.probability}});
            for (Index i = 0; i < path.component.amplitudes.size(); ++i)
                component_rows.push_back({t, static_cast<double>(path.node_id),
                                          static_cast<double>(i),
                                          path.component.amplitudes(i).real(),
                                          path.component.amplitudes(i).imag()});
        }
        query_log.push_back(Json{{"t", t},
                                 {"paths", paths},
                                 {"entropy", tree_entropy(tree, t)},
                                 {"decomposition_residual", residual}});
    }
    manifest["queries"] = query_log;
    out.write_json("tree_manifest.json", manifest);
    out.write_csv("components.csv", {"t", "path", "index", "re", "im"}, component_rows);

    checks.push_back({"tree_decomposition_identity", worst_residual <= 1e-9,
                      "worst residual " + format_number(worst_residual)});
    checks.push_back({"tree_probability_normalization", worst_prob <= 1e-9,
                      "worst |sum P - 1| " + format_number(worst_prob)});
    return checks;
}

inline std::vector<CheckResult> run_ivr(const Scenario& s, ArtifactWriter& out) {
    const Json& p = s.params();
    StateVector psi0 = s.parse_initial(require(p, "initial"));
    std::vector<SplitSpec> schedule = s.parse_schedule(require(p, "fine_schedule"));
    std::vector<CoarseVariant> variants;
    if (auto it = p.find("coarse_variants"); it != p.end()) {
        for (const auto& variant_json : *it) {
            CoarseVariant variant;
            for (const auto& [event_str, grouping_json] : require(variant_json, "groupings").items()) {
                std::map<int, int> grouping;
                for (const auto& [mu, eta] : grouping_json.items())
                    grouping[std::stoi(mu)] = eta.get<int>();
                variant.groupings[static_cast<std::size_t>(std::stoul(event_str))] = grouping;
            }
            variants.push_back(std::move(variant));
        }
    }
    double t_end = number_at(p, "t_end");
    Index checkpoints = static_cast<Index>(number_or(p, "checkpoints", 16));
    GrowthOptions opts;
    opts.max_paths = s.max_paths();
    IvrVerdict verdict = ivr_check(s.propagation_context(), psi0, 0.0, schedule, variants, t_end,
                                   s.tolerance(), checkpoints, opts);

    Json j;
    j["pass"] = verdict.pass;
    j["max_offdiagonal"] = verdict.max_offdiagonal;
    j["worst_time"] = verdict.worst_time;
    j["worst_pair"] = {verdict.worst_pair.first, verdict.worst_pair.second};
    j["checkpoints"] = verdict.checkpoint_times;
    j["offdiagonal"] = verdict.offdiagonal_per_checkpoint;
    j["re_ov_residuals"] = verdict.re_ov_residuals;
    Json reports = Json::array();
    for (const auto& report : verdict.coarse_reports) {
        Json invalidated = Json::array();
        for (const auto& diag : report.invalidated_downstream)
            invalidated.push_back(Json{{"event", diag.event_index},
                                       {"path", diag.path_labels},
                                       {"max_leakage", diag.max_leakage}});
        reports.push_back(Json{{"pass", report.pass},
                               {"max_residual", report.max_residual},
                               {"mapping_total", report.mapping_total},
                               {"invalidated_downstream", invalidated}});
    }
    j["coarse_reports"] = reports;
    out.write_json("ivr_verdict.json", j);

    bool expected = expect_bool(s.expect(), "pass", true);
    return {{"ivr", verdict.pass == expected,
             "max |D| offdiagonal " + format_number(verdict.max_offdiagonal)}};
}

inline std::vector<CheckResult> run_measure(const Scenario& s, ArtifactWriter& out) {
    const Json& p = s.params();
    MeasurementScenario scenario;
    const Json& coeffs = require(p, "system_coefficients");
    for (const auto& c : coeffs) {
        if (c.is_array() && c.size() == 2)
            scenario.coefficients.push_back(
                Complex(as_number(c[0], "system_coefficients"), as_number(c[1], "system_coefficients")));
        else
            scenario.coefficients.push_back(as_number(c, "system_coefficients"));
    }
    scenario.system_dim = static_cast<Index>(scenario.coefficients.size());
    for (const auto& m : require(p, "pointer_map"))
        scenario.pointer_map.push_back(static_cast<Index>(m.get<int>()));
    scenario.apparatus_initial = Vec::Zero(s.model().apparatus_dim());
    scenario.apparatus_initial(static_cast<Index>(number_or(p, "apparatus_start", 0))) = 1.0;
    Rng rng(seed_or(p, "environment_seed", s.seed() ^ 0x311ull));
    scenario.environment_state = random_unit_vector(s.model().environment_dim(), rng);
    scenario.t0 = 0.0;
    scenario.tau_1 = number_or(p, "tau_1", 1.0);
    scenario.t_1 = number_or(p, "t_1", 3.0);
    scenario.tau_d = number_or(p, "tau_d", 0.5);
    scenario.rotation_fraction = number_or(p, "rotation_fraction", 1.0);

    MeasurementRun run = run_measurement(scenario, s.model(), s.tolerance());

    Json j;
    j["max_deviation"] = run.report.max_deviation;
    j["pass"] = run.report.pass;
    Json rows = Json::array();
    for (const auto& row : run.report.rows)
        rows.push_back(Json{{"b", row.b},
                            {"mu", row.mu},
                            {"prob_born", row.prob_born},
                            {"prob_tree", row.prob_tree},
                            {"factor_fidelity", row.factor_fidelity}});
    j["outcomes"] = rows;
    j["pointer_fidelity"] = run.report.pointer_fidelity;
    Json inferred = Json::object();
    for (const auto& [mu, b] : run.report.inferred_value) inferred[std::to_string(mu)] = b;
    j["inferred_value"] = inferred;
    out.write_json("measurement_report.json", j);

    return {{"born_rule", run.report.pass,
             "max deviation " + format_number(run.report.max_deviation)}};
}

inline std::vector<CheckResult> run_master(const Scenario& s, ArtifactWriter& out) {
    const Json& p = s.params();
    StateVector psi0 = s.parse_initial(require(p, "initial"));
    std::size_t steps = static_cast<std::size_t>(number_or(p, "steps", 4));
    double period = number_or(p, "period", 1.0);
    double window_fraction = number_or(p, "window_fraction", 0.5);
    ProjectorFamily family = s.parse_family(require(p, "family"));

    std::vector<SplitSpec> schedule(steps);
    for (std::size_t k = 0; k < steps; ++k) {
        double start = period * static_cast<double>(k);
        schedule[k].window = {start, start + window_fraction * period};
        schedule[k].family = family;
        schedule[k].time_override = start + 0.5 * window_fraction * period;
    }
    GrowthOptions opts;
    opts.max_paths = s.max_paths();
    opts.prune_weight = 0.0;
    // The ideal branching regime forces a split at every event.
    Tolerance loose = Tolerance::with_eps(number_or(p, "split_eps", 2.0));
    Tree tree = grow_tree(s.propagation_context(), psi0, 0.0, schedule, loose, opts);
    PopulationSeries series = master_vs_exact(tree);

    std::vector<std::vector<double>> rows;
    for (std::size_t e = 0; e < series.p_exact.size(); ++e) {
        for (std::size_t l = 0; l < series.labels.size(); ++l) {
            double dp = e > 0 ? series.delta_p[e - 1](static_cast<Index>(l)) : 0.0;
            rows.push_back({static_cast<double>(e), static_cast<double>(series.labels[l]),
                            series.p_exact[e](static_cast<Index>(l)),
                            series.p_master[e](static_cast<Index>(l)), dp, series.entropy[e]});
        }
    }
    out.write_csv("populations.csv", {"step", "label", "p_exact", "p_master", "delta_p", "S_R"}, rows);

    Json j;
    j["steps"] = series.p_exact.size();
    j["path_counts"] = series.path_counts;
    j["gamma_variant_gap"] = series.gamma_variant_gap;
    Json gammas = Json::array();
    for (std::size_t e = 1; e < series.p_exact.size(); ++e) {
        TransitionMatrix tm = step_rates(tree, e);
        Json g;
        g["step"] = e;
        Json matrix = Json::array();
        for (Index r = 0; r < tm.gamma.rows(); ++r) {
            Json row = Json::array();
            for (Index c = 0; c < tm.gamma.cols(); ++c) row.push_back(tm.gamma(r, c));
            matrix.push_back(row);
        }
        g["gamma"] = matrix;
        gammas.push_back(g);
    }
    j["transitions"] = gammas;
    out.write_json("transition_matrices.json", j);

    bool stochastic = true;
    for (std::size_t e = 1; e < series.p_exact.size(); ++e) {
        TransitionMatrix tm = step_rates(tree, e);
        for (Index r = 0; r < tm.gamma.rows(); ++r) {
            if (!tm.row_defined[static_cast<std::size_t>(r)]) continue;
            stochastic = stochastic && std::abs(tm.gamma.row(r).sum() - 1.0) <= 1e-9 &&
                         tm.gamma.row(r).minCoeff() >= -1e-12;
        }
    }
    return {{"transition_rows_stochastic", stochastic, ""},
            {"delta_p_within_bound", series.all_within_bound(), ""}};
}

}  // namespace detail_scenario

/// 0 = all checks pass, 1 = a check failed or a computation error, 2 = schema.
inline int run_scenario_json(const Json& doc, const RunOptions& opts, std::ostream& out_stream,
                             std::ostream& err_stream, std::uint64_t scenario_hash = 0) {
    using namespace detail_scenario;
    auto started = std::chrono::steady_clock::now();
    try {
        Scenario scenario = Scenario::parse(doc, opts);
        set_worker_count(opts.threads);
        ArtifactWriter writer(scenario.output_dir(), opts.dry_run);

        std::vector<CheckResult> checks;
        if (!opts.dry_run) {
            const std::string& kind = scenario.experiment();
            if (kind == "ntc")
                checks = run_ntc(scenario, writer);
            else if (kind == "robs")
                checks = run_robs(scenario, writer);
            else if (kind == "echo")
                checks = run_echo(scenario, writer);
            else if (kind == "tree")
                checks = run_tree(scenario, writer);
            else if (kind == "ivr")
                checks = run_ivr(scenario, writer);
            else if (kind == "measure")
                checks = run_measure(scenario, writer);
            else if (kind == "master")
                checks = run_master(scenario, writer);
            else if (kind == "isolatable")
                checks = run_isolatable(scenario, writer);
        }

        bool all_pass = true;
        for (const auto& check : checks) all_pass = all_pass && check.pass;

        auto wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                           std::chrono::steady_clock::now() - started)
                           .count();
        Json manifest;
        char hash_hex[32];
        std::snprintf(hash_hex, sizeof(hash_hex), "%016llx",
                      static_cast<unsigned long long>(scenario_hash));
        manifest["scenario_hash"] = hash_hex;
        manifest["tool_version"] = kVersion;
        manifest["wall_ms"] = wall_ms;
        manifest["files"] = writer.files();
        Json check_log = Json::array();
        for (const auto& check : checks)
            check_log.push_back(Json{{"name", check.name}, {"pass", check.pass}, {"detail", check.detail}});
        manifest["checks"] = check_log;
        manifest["pass"] = all_pass;
        if (!opts.dry_run) {
            ArtifactWriter manifest_writer(scenario.output_dir(), false);
            manifest_writer.write_json("run_manifest.json", manifest);
        }

        out_stream << "scenario '" << scenario.name() << "' experiment " << scenario.experiment()
                   << (opts.dry_run ? " [dry-run]" : "") << "\n";
        for (const auto& check : checks)
            out_stream << "  [" << (check.pass ? "PASS" : "FAIL") << "] " << check.name
                       << (check.detail.empty() ? "" : "  (" + check.detail + ")") << "\n";
        return all_pass ? 0 : 1;
    } catch (const SchemaError& e) {
        err_stream << "schema error: " << e.what() << "\n";
        return 2;
    } catch (const PathOverflow& e) {
        err_stream << "path cap exceeded: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err_stream << "error: " << e.what() << "\n";
        return 1;
    }
}

inline std::uint64_t fnv1a_64(const std::string& bytes) {
    std::uint64_t hash = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        hash ^= c;
        hash *= 0x100000001b3ull;
    }
    return hash;
}

inline int run_scenario_file(const std::string& path, const RunOptions& opts, std::ostream& out_stream,
                             std::ostream& err_stream) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        err_stream << "cannot open scenario file: " << path << "\n";
        return 2;
    }
    std::stringstream buffer;
    buffer << in.rdbuf();
    Json doc;
    try {
        doc = Json::parse(buffer.str());
    } catch (const Json::parse_error& e) {
        err_stream << "scenario parse error: " << e.what() << "\n";
        return 2;
    }
    return run_scenario_json(doc, opts, out_stream, err_stream, fnv1a_64(buffer.str()));
}

}  // namespace qbranch
