#pragma once

// File-level orchestration for the batch CLI: each command loads its inputs,
// runs the pipeline, and writes deterministic CSV/JSON outputs.  Nothing here
// is stochastic beyond the seeded streams; equal inputs and seed give
// byte-identical files regardless of worker count.

#include <survdtr/dataset.hpp>
#include <survdtr/dtr_bml.hpp>
#include <survdtr/metrics.hpp>
#include <survdtr/qlearn.hpp>
#include <survdtr/simulation.hpp>
#include <survdtr/stats.hpp>

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace survdtr {

// Command-level rng stream purposes.  The backward-induction sampler itself
// claims chain ids 0..keep-1 plus 1<<48 and 2<<48 (dtr_bml.hpp), so command
// streams start at 3<<48.
constexpr std::uint64_t kSimulateStream = std::uint64_t{3} << 48;
constexpr std::uint64_t kReplicateTestStream = std::uint64_t{4} << 48;   // | scenario
constexpr std::uint64_t kReplicateTrainStream = std::uint64_t{5} << 48;  // | replication index
constexpr std::uint64_t kBootstrapStream = std::uint64_t{6} << 48;

// Per-replication base seed for the sampler so no replication reuses another's
// chain streams; odd multiplier makes rep -> seed injective mod 2^64.
inline std::uint64_t replication_fit_seed(std::uint64_t seed, int rep) {
    return seed + 0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(rep + 1);
}

// ---------------------------------------------------------------------------
// Column bindings and cohort loading

// Column-name bindings mirroring the two-stage wrapper signature.  The data
// model carries exactly three covariates per stage, so each list must name
// three columns.  When `overall_delta` is set, that single event-indicator
// column replaces delta1/delta2 and is split by the censoring rule the
// generator uses: entry is always observed for entrants, so the indicator
// applies to the Stage-2 duration for entrants and to the Stage-1 time for
// non-entrants.
struct ColumnBindings {
    std::vector<std::string> x1_columns = {"x1", "b1", "z1"};
    std::string a1 = "a1";
    std::string time1 = "time1";
    std::string delta1 = "delta1";
    std::string eta = "eta";
    std::vector<std::string> x2_columns = {"x2", "b2", "z2"};
    std::string a2 = "a2";
    std::string time2 = "time2";
    std::string delta2 = "delta2";
    std::string overall_delta;  // compatibility: single delta column
};

namespace detail {

inline std::size_t find_column(const std::vector<std::string>& header, const std::string& name,
                               const std::string& path) {
    for (std::size_t j = 0; j < header.size(); ++j) {
        if (header[j] == name) return j;
    }
    throw std::runtime_error("column '" + name + "' not found in header of " + path);
}

inline double field_double(const std::vector<std::string_view>& fields, std::size_t j) {
    return fields[j].empty() ? std::numeric_limits<double>::quiet_NaN() : parse_double(fields[j]);
}

inline int field_int(const std::vector<std::string_view>& fields, std::size_t j, int empty_value) {
    return fields[j].empty() ? empty_value : parse_int(fields[j]);
}

} // namespace detail

// Load a cohort CSV under the given bindings.  Empty Stage-2 fields are legal
// for non-entrants; entrants must carry their full Stage-2 record.
inline std::vector<TwoStageRow> load_cohort(const std::string& path, const ColumnBindings& bind) {
    if (bind.x1_columns.size() != 3 || bind.x2_columns.size() != 3) {
        throw std::invalid_argument("column bindings: expected exactly 3 covariate columns per stage");
    }
    const auto lines = detail::read_lines(path);
    if (lines.empty()) throw std::runtime_error("empty csv: " + path);
    std::vector<std::string> header;
    for (const auto sv : detail::split_fields(lines.front())) header.emplace_back(sv);

    const bool has_id = std::find(header.begin(), header.end(), "id") != header.end();
    const std::size_t c_id = has_id ? detail::find_column(header, "id", path) : 0;
    std::size_t c_x1[3];
    for (int k = 0; k < 3; ++k) c_x1[k] = detail::find_column(header, bind.x1_columns[static_cast<std::size_t>(k)], path);
    const std::size_t c_a1 = detail::find_column(header, bind.a1, path);
    const std::size_t c_t1 = detail::find_column(header, bind.time1, path);
    const std::size_t c_eta = detail::find_column(header, bind.eta, path);
    std::size_t c_x2[3];
    for (int k = 0; k < 3; ++k) c_x2[k] = detail::find_column(header, bind.x2_columns[static_cast<std::size_t>(k)], path);
    const std::size_t c_a2 = detail::find_column(header, bind.a2, path);
    const std::size_t c_t2 = detail::find_column(header, bind.time2, path);
    const bool split_delta = !bind.overall_delta.empty();
    const std::size_t c_delta = split_delta ? detail::find_column(header, bind.overall_delta, path) : 0;
    const std::size_t c_d1 = split_delta ? 0 : detail::find_column(header, bind.delta1, path);
    const std::size_t c_d2 = split_delta ? 0 : detail::find_column(header, bind.delta2, path);

    std::vector<TwoStageRow> rows;
    rows.reserve(lines.size() - 1);
    for (std::size_t ln = 1; ln < lines.size(); ++ln) {
        const auto f = detail::split_fields(lines[ln]);
        if (f.size() != header.size()) {
            throw std::runtime_error("csv " + path + ": expected " + std::to_string(header.size()) +
                                     " fields, got " + std::to_string(f.size()) + " on line " +
                                     std::to_string(ln + 1));
        }
        TwoStageRow r;
        r.id = has_id ? parse_int(f[c_id]) : static_cast<int>(ln - 1);
        r.x1 = parse_double(f[c_x1[0]]);
        r.b1 = parse_double(f[c_x1[1]]);
        r.z1 = parse_double(f[c_x1[2]]);
        r.a1 = parse_int(f[c_a1]);
        r.time1 = parse_double(f[c_t1]);
        r.eta = parse_int(f[c_eta]);
        r.x2 = detail::field_double(f, c_x2[0]);
        r.b2 = detail::field_double(f, c_x2[1]);
        r.z2 = detail::field_double(f, c_x2[2]);
        r.a2 = detail::field_int(f, c_a2, -1);
        r.time2 = detail::field_double(f, c_t2);
        if (split_delta) {
            const int d = parse_int(f[c_delta]);
            r.delta1 = r.eta == 1 ? 1 : d;
            r.delta2 = r.eta == 1 ? d : -1;
        } else {
            r.delta1 = detail::field_int(f, c_d1, 1);
            r.delta2 = detail::field_int(f, c_d2, -1);
        }
        if (r.is_entrant() &&
            (!std::isfinite(r.x2) || !std::isfinite(r.b2) || !std::isfinite(r.z2) ||
             !std::isfinite(r.time2) || r.a2 < 0 || r.delta2 < 0)) {
            throw std::runtime_error("csv " + path + ": entrant with incomplete Stage-2 fields on line " +
                                     std::to_string(ln + 1));
        }
        rows.push_back(r);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Small output helpers

namespace detail {

inline void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create directory " + dir + ": " + ec.message());
}

inline std::string join_path(const std::string& dir, const std::string& name) {
    return (std::filesystem::path(dir) / name).string();
}

inline void write_int_matrix_csv(const std::string& path, const IntMatrix& m) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write file: " + path);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            if (j > 0) out << ',';
            out << m(i, j);
        }
        out << "\n";
    }
}

inline IntMatrix read_int_matrix_csv(const std::string& path) {
    const auto lines = read_lines(path);
    if (lines.empty()) return IntMatrix(0, 0);
    const auto first = split_fields(lines.front());
    IntMatrix m(static_cast<Eigen::Index>(lines.size()), static_cast<Eigen::Index>(first.size()));
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const auto f = split_fields(lines[i]);
        if (f.size() != first.size()) {
            throw std::runtime_error("matrix csv: ragged row " + std::to_string(i + 1) + " in " + path);
        }
        for (std::size_t j = 0; j < f.size(); ++j) {
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = parse_int(f[j]);
        }
    }
    return m;
}

inline void write_json(const std::string& path, const nlohmann::json& j) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write file: " + path);
    out << j.dump(2) << "\n";
}

inline nlohmann::json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open file: " + path);
    return nlohmann::json::parse(in);
}

// empty string for non-finite values, mirroring the cohort CSV convention
inline std::string format_optional(double v) {
    return std::isfinite(v) ? format_double(v) : std::string();
}

// per-subject summaries of a subjects x draws posterior matrix
inline Vector row_means(const Matrix& m) { return m.rowwise().mean(); }

inline Vector row_quantiles(const Matrix& m, double q) {
    Vector out(m.rows());
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index d = 0; d < m.cols(); ++d) row[static_cast<std::size_t>(d)] = m(i, d);
        out(i) = quantile_type7(row, q);
    }
    return out;
}

} // namespace detail

// ---------------------------------------------------------------------------
// simulate

struct SimulateOptions {
    int scenario = 1;
    int n = 800;
    std::uint64_t seed = 0;
    std::string out_dir;
    // fill Stage-2 covariates for every subject (generative values), making
    // the cohort usable as a full-covariate prediction/test set
    bool full_covariates = false;
};

inline void run_simulate(const SimulateOptions& opt) {
    ScenarioConfig config{opt.scenario, opt.n, opt.seed};
    config.validate();
    detail::ensure_dir(opt.out_dir);
    RngStream rng(opt.seed, kSimulateStream);
    const SimulatedCohort cohort = generate(config, rng);

    const std::string cohort_path = detail::join_path(opt.out_dir, "cohort.csv");
    if (!opt.full_covariates) {
        write_cohort_csv(cohort_path, cohort.records);
    } else {
        const auto rows = test_rows(cohort);
        std::ofstream out(cohort_path);
        if (!out) throw std::runtime_error("cannot write file: " + cohort_path);
        out << kCohortHeader << "\n";
        for (const auto& r : rows) {
            out << r.id << ',' << format_double(r.x1) << ',' << format_double(r.b1) << ','
                << format_double(r.z1) << ',' << r.a1 << ',' << format_double(r.time1) << ','
                << r.delta1 << ',' << r.eta << ',' << format_double(r.x2) << ','
                << format_double(r.b2) << ',' << format_double(r.z2) << ',';
            if (r.is_entrant()) {
                out << r.a2 << ',' << format_double(r.time2) << ',' << r.delta2;
            } else {
                out << ",,";
            }
            out << "\n";
        }
    }
    write_truth_csv(detail::join_path(opt.out_dir, "truth.csv"), cohort.truth);
}

// ---------------------------------------------------------------------------
// fit-dtr

struct FitDtrOptions {
    std::string data_path;
    std::string newdata_path;  // optional full-covariate prediction rows
    std::string out_dir;
    ColumnBindings bindings;
    std::uint64_t seed = 0;
    int cores = 1;
    int burn = 1000;
    int keep = 1000;
    int burn1 = 250;
    int trees = 200;
    ImputeMode impute = ImputeMode::event;
    bool opt = true;  // false additionally writes per-action matrices
};

inline void run_fit_dtr(const FitDtrOptions& opt) {
    const auto records = load_cohort(opt.data_path, opt.bindings);
    std::vector<TwoStageRow> newdata;
    if (!opt.newdata_path.empty()) newdata = load_cohort(opt.newdata_path, opt.bindings);

    DtrConfig config;
    config.hyper.m = opt.trees;
    config.burn = opt.burn;
    config.keep = opt.keep;
    config.burn1 = opt.burn1;
    config.impute = opt.impute;
    config.seed = opt.seed;
    config.threads = opt.cores;
    const DtrPosterior post = optimize_dtr(records, newdata, config);

    detail::ensure_dir(opt.out_dir);
    auto path = [&](const std::string& name) { return detail::join_path(opt.out_dir, name); };

    nlohmann::json manifest;
    manifest["command"] = "fit_dtr";
    manifest["data"] = opt.data_path;
    manifest["seed"] = opt.seed;
    manifest["burn"] = opt.burn;
    manifest["keep"] = opt.keep;
    manifest["burn1"] = opt.burn1;
    manifest["trees"] = opt.trees;
    manifest["impute_mode"] = opt.impute == ImputeMode::event ? "event" : "censored";
    manifest["opt"] = opt.opt;
    manifest["n_subjects"] = records.size();
    manifest["action_set1"] = post.action_set1;
    manifest["action_set2"] = post.action_set2;
    manifest["entrant_rows"] = post.entrant_rows;
    {
        std::vector<int> ids;
        for (const auto& r : records) ids.push_back(r.id);
        manifest["subject_ids"] = ids;
    }
    // worker count deliberately not echoed: outputs are thread-invariant
    nlohmann::json shapes;

    auto put_matrix = [&](const std::string& name, const Matrix& m) {
        write_matrix_csv(path(name), m);
        shapes[name] = {m.rows(), m.cols()};
    };
    auto put_int_matrix = [&](const std::string& name, const IntMatrix& m) {
        detail::write_int_matrix_csv(path(name), m);
        shapes[name] = {m.rows(), m.cols()};
    };

    put_int_matrix("a2_opt.csv", post.a2_opt);
    put_matrix("yhat2_opt_mean.csv", chosen_values(post.yhat2_by_action, post.a2_opt));
    put_int_matrix("a1_opt.csv", post.a1_opt);
    put_matrix("yhat1_opt_mean.csv", chosen_values(post.yhat1_by_action, post.a1_opt));
    put_matrix("sigma1.csv", post.sigma1_draws.transpose());
    put_matrix("sigma2.csv", post.sigma2_draws.transpose());
    if (!opt.opt) {
        for (const auto& [a, m] : post.yhat1_by_action) put_matrix("a1_" + std::to_string(a) + ".csv", m);
        for (const auto& [a, m] : post.yhat2_by_action) put_matrix("a2_" + std::to_string(a) + ".csv", m);
    }
    if (!newdata.empty()) {
        manifest["newdata"] = opt.newdata_path;
        {
            std::vector<int> ids;
            for (const auto& r : newdata) ids.push_back(r.id);
            manifest["newdata_ids"] = ids;
        }
        put_int_matrix("a2_opt_new.csv", post.a2_opt_new);
        put_matrix("yhat2_opt_mean_new.csv", chosen_values(post.yhat2_by_action_new, post.a2_opt_new));
        put_int_matrix("a1_opt_new.csv", post.a1_opt_new);
        put_matrix("yhat1_opt_mean_new.csv", chosen_values(post.yhat1_by_action_new, post.a1_opt_new));
        if (!opt.opt) {
            for (const auto& [a, m] : post.yhat1_by_action_new) {
                put_matrix("a1_" + std::to_string(a) + "_new.csv", m);
            }
            for (const auto& [a, m] : post.yhat2_by_action_new) {
                put_matrix("a2_" + std::to_string(a) + "_new.csv", m);
            }
        }
    }
    manifest["files"] = shapes;
    detail::write_json(path("manifest.json"), manifest);
}

// ---------------------------------------------------------------------------
// qlearn

struct QlearnOptions {
    std::string data_path;
    std::string newdata_path;  // optional full-covariate prediction rows
    std::string out_dir;
    ColumnBindings bindings;
    std::string formula1;
    std::string formula2;
    int bootstrap = 0;  // 0 = point estimates only
    std::uint64_t seed = 0;
};

namespace detail {

inline void write_coefficient_csv(const std::string& path, const std::vector<std::string>& names,
                                  const Vector& point, const CoefficientTable* boot) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write file: " + path);
    out << "name,estimate,boot_mean,boot_sd,ci_lower,ci_upper\n";
    for (std::size_t k = 0; k < names.size(); ++k) {
        const auto i = static_cast<Eigen::Index>(k);
        out << names[k] << ',' << format_double(point(i)) << ',';
        if (boot) {
            out << format_double(boot->boot_mean(i)) << ',' << format_double(boot->boot_sd(i)) << ','
                << format_double(boot->lo95(i)) << ',' << format_double(boot->hi95(i));
        } else {
            out << ",,,";
        }
        out << "\n";
    }
}

} // namespace detail

inline void run_qlearn(const QlearnOptions& opt) {
    const auto records = load_cohort(opt.data_path, opt.bindings);
    const auto f1 = ModelFormula::parse(opt.formula1);
    const auto f2 = ModelFormula::parse(opt.formula2);
    const QlearnResult model = qlearn_two_stage(records, f1, f2);

    detail::ensure_dir(opt.out_dir);
    auto path = [&](const std::string& name) { return detail::join_path(opt.out_dir, name); };

    {
        std::ofstream out(path("predictions.csv"));
        if (!out) throw std::runtime_error("cannot write file: " + path("predictions.csv"));
        out << kTruthHeader << "\n";  // same schema as a truth table: predicted optima
        if (opt.newdata_path.empty()) {
            for (std::size_t i = 0; i < records.size(); ++i) {
                out << records[i].id << ',' << model.a1_opt[i] << ',';
                if (model.a2_opt[i] >= 0) out << model.a2_opt[i];
                out << ',' << detail::format_optional(model.mean_logt2_opt[i]) << ','
                    << detail::format_optional(model.mean_logtotal_opt[i]) << "\n";
            }
        } else {
            const auto newdata = load_cohort(opt.newdata_path, opt.bindings);
            detail::check_newdata(newdata);  // full covariates required
            const QlearnPrediction qp = qlearn_predict(model, newdata);
            for (std::size_t i = 0; i < newdata.size(); ++i) {
                out << newdata[i].id << ',' << qp.a1_opt[i] << ',' << qp.a2_opt[i] << ','
                    << format_double(qp.mean_logt2_opt[i]) << ','
                    << format_double(qp.mean_logtotal_opt[i]) << "\n";
            }
        }
    }

    auto stage_names = [](const ModelFormula& f) {
        auto names = design_column_names(f);
        names.push_back("log(scale)");
        return names;
    };
    auto stage_point = [](const LognormalAftFit& fit) {
        Vector point(fit.beta.size() + 1);
        point.head(fit.beta.size()) = fit.beta;
        point(fit.beta.size()) = fit.log_scale;
        return point;
    };

    nlohmann::json manifest;
    manifest["command"] = "qlearn";
    manifest["data"] = opt.data_path;
    if (!opt.newdata_path.empty()) manifest["newdata"] = opt.newdata_path;
    manifest["formula1"] = opt.formula1;
    manifest["formula2"] = opt.formula2;
    manifest["bootstrap"] = opt.bootstrap;
    manifest["seed"] = opt.seed;
    manifest["n_subjects"] = records.size();
    manifest["converged1"] = model.fit1.converged;
    manifest["converged2"] = model.fit2.converged;
    manifest["scale1"] = model.fit1.scale();
    manifest["scale2"] = model.fit2.scale();

    if (opt.bootstrap > 0) {
        RngStream rng(opt.seed, kBootstrapStream);
        const BootstrapQlearn boot = bootstrap_qlearn(records, f1, f2, opt.bootstrap, rng);
        detail::write_coefficient_csv(path("coefficients_stage1.csv"), boot.stage1.names,
                                      boot.stage1.point, &boot.stage1);
        detail::write_coefficient_csv(path("coefficients_stage2.csv"), boot.stage2.names,
                                      boot.stage2.point, &boot.stage2);
        manifest["failed_resamples"] = boot.failed_resamples;
    } else {
        detail::write_coefficient_csv(path("coefficients_stage1.csv"), stage_names(f1),
                                      stage_point(model.fit1), nullptr);
        detail::write_coefficient_csv(path("coefficients_stage2.csv"), stage_names(f2),
                                      stage_point(model.fit2), nullptr);
    }
    detail::write_json(path("manifest.json"), manifest);
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateOptions {
    std::string pred_path;  // fit-dtr/qlearn output directory, or a predictions CSV
    std::string truth_path;
    std::string out_dir;
};

namespace detail {

// Predictions reduced to one point estimate per subject per stage, plus
// optional posterior interval bounds (absent for parametric Q-learning).
struct ReducedPredictions {
    std::vector<int> a1, a2;
    Vector est1, est2;
    bool has_intervals = false;
    Vector lo1, hi1, lo2, hi2;
    std::vector<int> ids;
};

inline ReducedPredictions reduce_prediction_csv(const std::string& path) {
    const auto lines = read_lines(path);
    if (lines.empty() || lines.front() != kTruthHeader) {
        throw std::runtime_error("prediction csv: missing or wrong header in " + path);
    }
    ReducedPredictions out;
    const auto n = static_cast<Eigen::Index>(lines.size() - 1);
    out.est1.resize(n);
    out.est2.resize(n);
    for (std::size_t ln = 1; ln < lines.size(); ++ln) {
        const auto f = split_fields(lines[ln]);
        if (f.size() != 5) {
            throw std::runtime_error("prediction csv: expected 5 fields on line " + std::to_string(ln + 1));
        }
        out.ids.push_back(parse_int(f[0]));
        out.a1.push_back(parse_int(f[1]));
        out.a2.push_back(field_int(f, 2, -1));
        out.est2(static_cast<Eigen::Index>(ln - 1)) = field_double(f, 3);
        out.est1(static_cast<Eigen::Index>(ln - 1)) = field_double(f, 4);
    }
    return out;
}

inline ReducedPredictions reduce_fit_dtr_dir(const std::string& dir) {
    const auto manifest = read_json(join_path(dir, "manifest.json"));
    const bool use_new = manifest.contains("newdata_ids");
    const std::string suffix = use_new ? "_new.csv" : ".csv";

    const IntMatrix a1 = read_int_matrix_csv(join_path(dir, "a1_opt" + suffix));
    const IntMatrix a2 = read_int_matrix_csv(join_path(dir, "a2_opt" + suffix));
    const Matrix y1 = read_matrix_csv(join_path(dir, "yhat1_opt_mean" + suffix));
    const Matrix y2 = read_matrix_csv(join_path(dir, "yhat2_opt_mean" + suffix));
    if (a1.rows() != a2.rows()) {
        throw std::runtime_error("fit output " + dir + ": stage-wise prediction row counts differ (" +
                                 std::to_string(a1.rows()) + " vs " + std::to_string(a2.rows()) +
                                 "); evaluate needs predictions for one common subject set, e.g. via --newdata");
    }

    ReducedPredictions out;
    out.a1 = posterior_mode_action(a1);
    out.a2 = posterior_mode_action(a2);
    out.est1 = row_means(y1);
    out.est2 = row_means(y2);
    out.has_intervals = true;
    out.lo1 = row_quantiles(y1, 0.025);
    out.hi1 = row_quantiles(y1, 0.975);
    out.lo2 = row_quantiles(y2, 0.025);
    out.hi2 = row_quantiles(y2, 0.975);
    out.ids = manifest.at(use_new ? "newdata_ids" : "subject_ids").get<std::vector<int>>();
    return out;
}

} // namespace detail

// Evaluate point predictions against a truth table; returns the report and
// writes report.json plus a tidy report.csv when out_dir is non-empty.
inline EvaluationReport run_evaluate(const EvaluateOptions& opt) {
    detail::ReducedPredictions pred;
    if (std::filesystem::is_directory(opt.pred_path)) {
        const auto manifest = detail::read_json(detail::join_path(opt.pred_path, "manifest.json"));
        const std::string command = manifest.at("command").get<std::string>();
        if (command == "fit_dtr") {
            pred = detail::reduce_fit_dtr_dir(opt.pred_path);
        } else if (command == "qlearn") {
            pred = detail::reduce_prediction_csv(detail::join_path(opt.pred_path, "predictions.csv"));
        } else {
            throw std::runtime_error("evaluate: unsupported prediction kind '" + command + "'");
        }
    } else {
        pred = detail::reduce_prediction_csv(opt.pred_path);
    }

    const auto truth = read_truth_csv(opt.truth_path);
    const auto n = truth.size();
    if (pred.ids.size() != n) {
        throw std::runtime_error("evaluate: " + std::to_string(pred.ids.size()) + " predictions vs " +
                                 std::to_string(n) + " truth rows");
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (pred.ids[i] != truth[i].id) {
            throw std::runtime_error("evaluate: prediction id " + std::to_string(pred.ids[i]) +
                                     " does not match truth id " + std::to_string(truth[i].id) +
                                     " on row " + std::to_string(i + 1));
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (pred.a2[i] < 0 || !std::isfinite(pred.est2(static_cast<Eigen::Index>(i)))) {
            throw std::runtime_error("evaluate: subject id " + std::to_string(pred.ids[i]) +
                                     " lacks a Stage-2 prediction; evaluate needs full-covariate "
                                     "predictions for every row (predict on a test set)");
        }
    }

    std::vector<int> true1(n), true2(n);
    Vector mt2(static_cast<Eigen::Index>(n)), mtot(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        true1[i] = truth[i].a1_opt;
        true2[i] = truth[i].a2_opt;
        mt2(static_cast<Eigen::Index>(i)) = truth[i].mean_logt2_opt;
        mtot(static_cast<Eigen::Index>(i)) = truth[i].mean_logtotal_opt;
    }

    EvaluationReport report;
    const PotResult p = pot(pred.a1, true1, pred.a2, true2);
    report.pot_stage1 = p.stage1;
    report.pot_stage2 = p.stage2;
    report.pot_overall = p.overall;
    report.mse_stage1 = (pred.est1 - mtot).squaredNorm() / static_cast<double>(n);
    report.mse_stage2 = (pred.est2 - mt2).squaredNorm() / static_cast<double>(n);
    // single-run evaluation cannot decompose into bias^2 + variance
    report.bias2_stage1 = report.variance_stage1 = std::numeric_limits<double>::quiet_NaN();
    report.bias2_stage2 = report.variance_stage2 = std::numeric_limits<double>::quiet_NaN();
    if (pred.has_intervals) {
        report.coverage_stage1 = coverage_rate(pred.lo1, pred.hi1, mtot);
        report.coverage_stage2 = coverage_rate(pred.lo2, pred.hi2, mt2);
    } else {
        report.coverage_stage1 = report.coverage_stage2 = std::numeric_limits<double>::quiet_NaN();
    }

    if (!opt.out_dir.empty()) {
        detail::ensure_dir(opt.out_dir);
        nlohmann::json j;
        j["pot"] = {{"stage1", report.pot_stage1}, {"stage2", report.pot_stage2}, {"overall", report.pot_overall}};
        j["mse"] = {{"stage1", report.mse_stage1}, {"stage2", report.mse_stage2}};
        if (pred.has_intervals) {
            j["coverage"] = {{"stage1", report.coverage_stage1}, {"stage2", report.coverage_stage2}};
        }
        j["n_subjects"] = n;
        detail::write_json(detail::join_path(opt.out_dir, "report.json"), j);

        std::ofstream out(detail::join_path(opt.out_dir, "report.csv"));
        if (!out) throw std::runtime_error("cannot write report.csv in " + opt.out_dir);
        out << "stage,metric,value\n";
        out << "1,pot," << format_double(report.pot_stage1) << "\n";
        out << "2,pot," << format_double(report.pot_stage2) << "\n";
        out << "overall,pot," << format_double(report.pot_overall) << "\n";
        out << "1,mse," << format_double(report.mse_stage1) << "\n";
        out << "2,mse," << format_double(report.mse_stage2) << "\n";
        if (pred.has_intervals) {
            out << "1,coverage," << format_double(report.coverage_stage1) << "\n";
            out << "2,coverage," << format_double(report.coverage_stage2) << "\n";
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// replicate

struct ReplicateOptions {
    int scenario = 1;
    int replications = 20;
    int train_n = 800;
    int test_n = 400;
    std::vector<std::string> methods;  // empty = scenario defaults
    std::uint64_t seed = 0;
    int cores = 1;
    int burn = 1000;
    int keep = 500;
    int burn1 = 250;
    int trees = 200;
    ImputeMode impute = ImputeMode::event;
    std::string out_dir;  // empty = in-memory only
};

struct MethodSummary {
    std::string name;
    double pot_stage1 = 0.0, pot_stage2 = 0.0, pot_overall = 0.0;
    MseDecomposition mse_stage1, mse_stage2;
    double coverage_stage1 = std::numeric_limits<double>::quiet_NaN();
    double coverage_stage2 = std::numeric_limits<double>::quiet_NaN();
    // per-replication traces
    std::vector<double> pot1_reps, pot2_reps, pot_overall_reps, coverage1_reps, coverage2_reps;
};

struct ReplicationStudy {
    std::vector<MethodSummary> methods;
};

namespace detail {

// Parametric working models for the comparators: one correctly specified pair
// per scenario, plus the deliberately misspecified alternatives.
inline std::pair<std::string, std::string> method_formulas(int scenario, const std::string& method) {
    static const std::string q1_true = "x1 + b1 + x1*b1 + a1 + a1*x1 + a1*b1";
    static const std::string q2_true = "x2 + b2 + x2*b2 + x1 + b1 + x1*b1 + a2 + a2*x2 + a2*b2";
    static const std::string q1_false = "x1 + b1 + z1 + a1 + a1*x1 + a1*z1";
    static const std::string q2_false = "x2 + b2 + z2 + x1 + b1 + a2 + a2*x2 + a2*z2";
    static const std::string q1_lin = "x1 + b1 + z1 + a1";
    static const std::string q2_lin = "x2 + b2 + z2 + x1 + b1 + z1 + a2";
    static const std::string q1_int =
        "x1 + b1 + z1 + x1*b1 + x1*z1 + b1*z1 + a1 + a1*x1 + a1*b1 + a1*z1";
    static const std::string q2_int =
        "x2 + b2 + z2 + x2*b2 + x2*z2 + b2*z2 + x1 + b1 + z1 + x1*b1 + x1*z1 + b1*z1 + a2 + a2*x2 + "
        "a2*b2 + a2*z2";

    if (scenario == 1) {
        if (method == "q_tt") return {q1_true, q2_true};
        if (method == "q_tf") return {q1_true, q2_false};
        if (method == "q_ft") return {q1_false, q2_true};
        if (method == "q_ff") return {q1_false, q2_false};
    } else {
        if (method == "qlin") return {q1_lin, q2_lin};
        if (method == "qint") return {q1_int, q2_int};
    }
    throw std::invalid_argument("unknown method '" + method + "' for scenario " + std::to_string(scenario));
}

inline std::vector<std::string> default_methods(int scenario) {
    if (scenario == 1) return {"bart", "q_tt", "q_tf", "q_ft", "q_ff"};
    return {"bart", "qlin", "qint"};
}

} // namespace detail

inline ReplicationStudy run_replication_study(const ReplicateOptions& opt) {
    ScenarioConfig{opt.scenario, opt.train_n, opt.seed}.validate();
    if (opt.replications < 2) throw std::invalid_argument("replicate: needs >= 2 replications");
    if (opt.test_n < 1) throw std::invalid_argument("replicate: test_n must be >= 1");
    std::vector<std::string> methods = opt.methods.empty() ? detail::default_methods(opt.scenario) : opt.methods;
    for (const auto& m : methods) {
        if (m != "bart") detail::method_formulas(opt.scenario, m);  // validates the name
    }

    // one fixed test cohort per study; every replication predicts it
    RngStream test_rng(opt.seed, kReplicateTestStream | static_cast<std::uint64_t>(opt.scenario));
    const SimulatedCohort test_cohort = generate({opt.scenario, opt.test_n, opt.seed}, test_rng);
    const auto test = test_rows(test_cohort);
    const auto n_test = static_cast<Eigen::Index>(test.size());
    std::vector<int> true1, true2;
    Vector mt2(n_test), mtot(n_test);
    for (Eigen::Index i = 0; i < n_test; ++i) {
        const auto& t = test_cohort.truth[static_cast<std::size_t>(i)];
        true1.push_back(t.a1_opt);
        true2.push_back(t.a2_opt);
        mt2(i) = t.mean_logt2_opt;
        mtot(i) = t.mean_logtotal_opt;
    }

    const auto R = opt.replications;
    struct Accum {
        Matrix est1, est2;  // replications x test subjects
    };
    std::map<std::string, Accum> accum;
    ReplicationStudy study;
    for (const auto& m : methods) {
        MethodSummary s;
        s.name = m;
        study.methods.push_back(s);
        accum[m].est1.resize(R, n_test);
        accum[m].est2.resize(R, n_test);
    }
    auto summary_of = [&](const std::string& name) -> MethodSummary& {
        for (auto& s : study.methods) {
            if (s.name == name) return s;
        }
        throw std::logic_error("method summary missing");
    };

    for (int rep = 0; rep < R; ++rep) {
        RngStream train_rng(opt.seed, kReplicateTrainStream | static_cast<std::uint64_t>(rep));
        const SimulatedCohort train = generate({opt.scenario, opt.train_n, opt.seed}, train_rng);

        for (const auto& name : methods) {
            MethodSummary& s = summary_of(name);
            std::vector<int> a1_hat, a2_hat;
            Vector est1, est2;
            if (name == "bart") {
                DtrConfig config;
                config.hyper.m = opt.trees;
                config.burn = opt.burn;
                config.keep = opt.keep;
                config.burn1 = opt.burn1;
                config.impute = opt.impute;
                config.seed = replication_fit_seed(opt.seed, rep);
                config.threads = opt.cores;
                const DtrPosterior post = optimize_dtr(train.records, test, config);
                const Matrix y1 = chosen_values(post.yhat1_by_action_new, post.a1_opt_new);
                const Matrix y2 = chosen_values(post.yhat2_by_action_new, post.a2_opt_new);
                a1_hat = posterior_mode_action(post.a1_opt_new);
                a2_hat = posterior_mode_action(post.a2_opt_new);
                est1 = detail::row_means(y1);
                est2 = detail::row_means(y2);
                s.coverage1_reps.push_back(
                    coverage_rate(detail::row_quantiles(y1, 0.025), detail::row_quantiles(y1, 0.975), mtot));
                s.coverage2_reps.push_back(
                    coverage_rate(detail::row_quantiles(y2, 0.025), detail::row_quantiles(y2, 0.975), mt2));
            } else {
                const auto [f1_text, f2_text] = detail::method_formulas(opt.scenario, name);
                const auto model = qlearn_two_stage(train.records, ModelFormula::parse(f1_text),
                                                    ModelFormula::parse(f2_text));
                const auto qp = qlearn_predict(model, test);
                a1_hat = qp.a1_opt;
                a2_hat = qp.a2_opt;
                est1.resize(n_test);
                est2.resize(n_test);
                for (Eigen::Index i = 0; i < n_test; ++i) {
                    est1(i) = qp.mean_logtotal_opt[static_cast<std::size_t>(i)];
                    est2(i) = qp.mean_logt2_opt[static_cast<std::size_t>(i)];
                }
            }
            const PotResult p = pot(a1_hat, true1, a2_hat, true2);
            s.pot1_reps.push_back(p.stage1);
            s.pot2_reps.push_back(p.stage2);
            s.pot_overall_reps.push_back(p.overall);
            accum[name].est1.row(rep) = est1.transpose();
            accum[name].est2.row(rep) = est2.transpose();
        }
    }

    for (auto& s : study.methods) {
        s.pot_stage1 = mean_of(s.pot1_reps);
        s.pot_stage2 = mean_of(s.pot2_reps);
        s.pot_overall = mean_of(s.pot_overall_reps);
        s.mse_stage1 = mse_decomposition(accum[s.name].est1, mtot);
        s.mse_stage2 = mse_decomposition(accum[s.name].est2, mt2);
        if (!s.coverage1_reps.empty()) {
            s.coverage_stage1 = mean_of(s.coverage1_reps);
            s.coverage_stage2 = mean_of(s.coverage2_reps);
        }
    }
    return study;
}

inline ReplicationStudy run_replicate(const ReplicateOptions& opt) {
    const ReplicationStudy study = run_replication_study(opt);
    if (opt.out_dir.empty()) return study;
    detail::ensure_dir(opt.out_dir);

    {
        std::ofstream out(detail::join_path(opt.out_dir, "summary.csv"));
        if (!out) throw std::runtime_error("cannot write summary.csv in " + opt.out_dir);
        out << "method,stage,metric,value\n";
        for (const auto& s : study.methods) {
            out << s.name << ",1,pot," << format_double(s.pot_stage1) << "\n";
            out << s.name << ",2,pot," << format_double(s.pot_stage2) << "\n";
            out << s.name << ",overall,pot," << format_double(s.pot_overall) << "\n";
            out << s.name << ",1,mse," << format_double(s.mse_stage1.mse) << "\n";
            out << s.name << ",1,bias2," << format_double(s.mse_stage1.bias2) << "\n";
            out << s.name << ",1,variance," << format_double(s.mse_stage1.variance) << "\n";
            out << s.name << ",2,mse," << format_double(s.mse_stage2.mse) << "\n";
            out << s.name << ",2,bias2," << format_double(s.mse_stage2.bias2) << "\n";
            out << s.name << ",2,variance," << format_double(s.mse_stage2.variance) << "\n";
            if (std::isfinite(s.coverage_stage1)) {
                out << s.name << ",1,coverage," << format_double(s.coverage_stage1) << "\n";
                out << s.name << ",2,coverage," << format_double(s.coverage_stage2) << "\n";
            }
        }
    }
    {
        std::ofstream out(detail::join_path(opt.out_dir, "per_rep.csv"));
        if (!out) throw std::runtime_error("cannot write per_rep.csv in " + opt.out_dir);
        out << "method,rep,pot_stage1,pot_stage2,pot_overall,coverage_stage1,coverage_stage2\n";
        for (const auto& s : study.methods) {
            for (std::size_t r = 0; r < s.pot1_reps.size(); ++r) {
                out << s.name << ',' << r << ',' << format_double(s.pot1_reps[r]) << ','
                    << format_double(s.pot2_reps[r]) << ',' << format_double(s.pot_overall_reps[r]) << ',';
                if (r < s.coverage1_reps.size()) {
                    out << format_double(s.coverage1_reps[r]) << ',' << format_double(s.coverage2_reps[r]);
                } else {
                    out << ',';
                }
                out << "\n";
            }
        }
    }
    nlohmann::json manifest;
    manifest["command"] = "replicate";
    manifest["scenario"] = opt.scenario;
    manifest["replications"] = opt.replications;
    manifest["train_n"] = opt.train_n;
    manifest["test_n"] = opt.test_n;
    manifest["seed"] = opt.seed;
    manifest["burn"] = opt.burn;
    manifest["keep"] = opt.keep;
    manifest["burn1"] = opt.burn1;
    manifest["trees"] = opt.trees;
    manifest["impute_mode"] = opt.impute == ImputeMode::event ? "event" : "censored";
    {
        std::vector<std::string> names;
        for (const auto& s : study.methods) names.push_back(s.name);
        manifest["methods"] = names;
    }
    detail::write_json(detail::join_path(opt.out_dir, "manifest.json"), manifest);
    return study;
}

// ---------------------------------------------------------------------------
// contrasts

struct ContrastsOptions {
    std::string fit_dir;  // fit-dtr output with per-action matrices (--opt false)
    double horizon = 24.0;
    std::string out_dir;
};

inline void run_contrasts(const ContrastsOptions& opt) {
    const auto manifest = detail::read_json(detail::join_path(opt.fit_dir, "manifest.json"));
    if (manifest.at("command").get<std::string>() != "fit_dtr") {
        throw std::runtime_error("contrasts: " + opt.fit_dir + " is not a fit-dtr output directory");
    }
    const auto action_set1 = manifest.at("action_set1").get<std::vector<int>>();
    if (action_set1 != std::vector<int>{0, 1}) {
        throw std::runtime_error("contrasts: needs binary Stage-1 actions {0,1}");
    }
    if (manifest.at("opt").get<bool>()) {
        throw std::runtime_error("contrasts: fit directory lacks per-action matrices; rerun fit-dtr with --opt false");
    }
    const Matrix m0 = read_matrix_csv(detail::join_path(opt.fit_dir, "a1_0.csv"));
    const Matrix m1 = read_matrix_csv(detail::join_path(opt.fit_dir, "a1_1.csv"));
    const Matrix sigma_row = read_matrix_csv(detail::join_path(opt.fit_dir, "sigma1.csv"));
    const Vector sigma = sigma_row.transpose();
    const auto ids = manifest.at("subject_ids").get<std::vector<int>>();

    const PosteriorContrasts pc = posterior_contrasts(m1, m0, sigma, opt.horizon);

    detail::ensure_dir(opt.out_dir);
    auto write_scale = [&](const std::string& name, const ContrastSummary& s) {
        std::ofstream out(detail::join_path(opt.out_dir, name));
        if (!out) throw std::runtime_error("cannot write " + name + " in " + opt.out_dir);
        out << "rank,subject,mean,q025,q25,q75,q975\n";
        for (std::size_t rank = 0; rank < pc.waterfall.size(); ++rank) {
            const auto i = static_cast<Eigen::Index>(pc.waterfall[rank]);
            out << rank << ',' << ids[static_cast<std::size_t>(i)] << ',' << format_double(s.mean(i))
                << ',' << format_double(s.q025(i)) << ',' << format_double(s.q25(i)) << ','
                << format_double(s.q75(i)) << ',' << format_double(s.q975(i)) << "\n";
        }
    };
    write_scale("contrasts_dlog.csv", pc.summary_dlog);
    write_scale("contrasts_dmedian.csv", pc.summary_dmedian);
    write_scale("contrasts_dsurv.csv", pc.summary_dsurv);
}

} // namespace survdtr
