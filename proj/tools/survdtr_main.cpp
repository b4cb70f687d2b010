// Batch command-line surface for two-stage survival dynamic-treatment-regime
// estimation: simulate cohorts, fit the backward-induction BART sampler or a
// parametric Q-learning comparator, evaluate against truth tables, run
// replication studies, and summarize posterior treatment contrasts.

#include <survdtr/commands.hpp>

#include <CLI11.hpp>

#include <algorithm>
#include <cstdint>
#include <iostream>
#include <string>

namespace {

std::string single_line(std::string s) {
    std::replace(s.begin(), s.end(), '\n', ';');
    return s;
}

survdtr::ImputeMode parse_impute(const std::string& text) {
    return text == "censored" ? survdtr::ImputeMode::censored : survdtr::ImputeMode::event;
}

// shared column-binding flags for commands that read cohort CSVs
void add_binding_flags(CLI::App* cmd, survdtr::ColumnBindings& bind) {
    cmd->add_option("--x1-columns", bind.x1_columns, "Stage-1 covariate columns (exactly 3)")
        ->delimiter(',')
        ->capture_default_str();
    cmd->add_option("--a1", bind.a1, "Stage-1 action column")->capture_default_str();
    cmd->add_option("--time1", bind.time1, "Stage-1 time column")->capture_default_str();
    cmd->add_option("--delta1", bind.delta1, "Stage-1 event indicator column")->capture_default_str();
    cmd->add_option("--eta", bind.eta, "Stage-2 entry indicator column")->capture_default_str();
    cmd->add_option("--x2-columns", bind.x2_columns, "Stage-2 covariate columns (exactly 3)")
        ->delimiter(',')
        ->capture_default_str();
    cmd->add_option("--a2", bind.a2, "Stage-2 action column")->capture_default_str();
    cmd->add_option("--time2", bind.time2, "Stage-2 time column")->capture_default_str();
    cmd->add_option("--delta2", bind.delta2, "Stage-2 event indicator column")->capture_default_str();
    cmd->add_option("--delta", bind.overall_delta,
                    "Compatibility: single overall event indicator column, split into per-stage "
                    "indicators (entrants' entry is treated as observed)");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Two-stage survival DTR estimation: backward-induction AFT BART and parametric Q-learning"};
    app.require_subcommand(1);

    survdtr::SimulateOptions sim;
    auto* c_sim = app.add_subcommand("simulate", "Generate a synthetic two-stage cohort CSV plus its truth table");
    c_sim->add_option("--scenario", sim.scenario, "Scenario (1 or 2)")->required();
    c_sim->add_option("--n", sim.n, "Number of subjects")->required()->check(CLI::PositiveNumber);
    c_sim->add_option("--seed", sim.seed, "RNG seed")->capture_default_str();
    c_sim->add_option("--out", sim.out_dir, "Output directory")->required();
    c_sim->add_flag("--full-covariates", sim.full_covariates,
                    "Fill Stage-2 covariates for every subject (test-set use)");

    survdtr::FitDtrOptions fit;
    std::string fit_impute = "event";
    auto* c_fit = app.add_subcommand("fit-dtr", "Fit the backward-induction AFT BART sampler");
    c_fit->add_option("--data", fit.data_path, "Training cohort CSV")->required();
    c_fit->add_option("--newdata", fit.newdata_path, "Full-covariate prediction rows CSV");
    c_fit->add_option("--out", fit.out_dir, "Output directory")->required();
    c_fit->add_option("--seed", fit.seed, "RNG seed")->required();
    c_fit->add_option("--cores", fit.cores, "Worker threads for the Stage-1 ensemble")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    c_fit->add_option("--burn", fit.burn, "Stage-2 burn-in sweeps")->capture_default_str();
    c_fit->add_option("--keep", fit.keep, "Kept posterior draws (= Stage-1 chains)")->capture_default_str();
    c_fit->add_option("--burn1", fit.burn1, "Per-chain Stage-1 burn-in sweeps")->capture_default_str();
    c_fit->add_option("--trees", fit.trees, "Trees per forest")->capture_default_str();
    c_fit->add_option("--impute-mode", fit_impute, "Counterfactual imputation mode")
        ->check(CLI::IsMember({"event", "censored"}))
        ->capture_default_str();
    c_fit->add_option("--opt", fit.opt, "false additionally writes per-action matrices")
        ->capture_default_str();
    add_binding_flags(c_fit, fit.bindings);

    survdtr::QlearnOptions ql;
    auto* c_ql = app.add_subcommand("qlearn", "Fit the parametric log-normal Q-learning comparator");
    c_ql->add_option("--data", ql.data_path, "Training cohort CSV")->required();
    c_ql->add_option("--newdata", ql.newdata_path, "Full-covariate prediction rows CSV");
    c_ql->add_option("--out", ql.out_dir, "Output directory")->required();
    c_ql->add_option("--formula1", ql.formula1, "Stage-1 model terms, e.g. \"x1 + b1 + a1 + a1*x1\"")
        ->required();
    c_ql->add_option("--formula2", ql.formula2, "Stage-2 model terms")->required();
    c_ql->add_option("--bootstrap", ql.bootstrap, "Bootstrap resamples (0 = point estimates only)")
        ->capture_default_str();
    c_ql->add_option("--seed", ql.seed, "RNG seed")->required();
    add_binding_flags(c_ql, ql.bindings);

    survdtr::EvaluateOptions ev;
    auto* c_ev = app.add_subcommand("evaluate", "Score predictions against a truth table");
    c_ev->add_option("--pred", ev.pred_path, "fit-dtr/qlearn output directory, or a predictions CSV")
        ->required();
    c_ev->add_option("--truth", ev.truth_path, "Truth CSV")->required();
    c_ev->add_option("--out", ev.out_dir, "Output directory")->required();

    survdtr::ReplicateOptions rep;
    std::string rep_impute = "event";
    auto* c_rep = app.add_subcommand("replicate", "Run a replication study and summarize per-method metrics");
    c_rep->add_option("--scenario", rep.scenario, "Scenario (1 or 2)")->required();
    c_rep->add_option("--replications", rep.replications, "Training replications")->capture_default_str();
    c_rep->add_option("--train-n", rep.train_n, "Training cohort size")->capture_default_str();
    c_rep->add_option("--test-n", rep.test_n, "Test cohort size")->capture_default_str();
    c_rep->add_option("--methods", rep.methods,
                      "Methods to run (scenario 1: bart,q_tt,q_tf,q_ft,q_ff; scenario 2: bart,qlin,qint)")
        ->delimiter(',');
    c_rep->add_option("--seed", rep.seed, "RNG seed")->required();
    c_rep->add_option("--cores", rep.cores, "Worker threads")->check(CLI::PositiveNumber)->capture_default_str();
    c_rep->add_option("--burn", rep.burn, "Stage-2 burn-in sweeps")->capture_default_str();
    c_rep->add_option("--keep", rep.keep, "Kept posterior draws")->capture_default_str();
    c_rep->add_option("--burn1", rep.burn1, "Per-chain Stage-1 burn-in sweeps")->capture_default_str();
    c_rep->add_option("--trees", rep.trees, "Trees per forest")->capture_default_str();
    c_rep->add_option("--impute-mode", rep_impute, "Counterfactual imputation mode")
        ->check(CLI::IsMember({"event", "censored"}))
        ->capture_default_str();
    c_rep->add_option("--out", rep.out_dir, "Output directory")->required();

    survdtr::ContrastsOptions con;
    auto* c_con = app.add_subcommand("contrasts", "Per-subject posterior treatment contrasts on three scales");
    c_con->add_option("--fit", con.fit_dir, "fit-dtr output directory (needs --opt false matrices)")
        ->required();
    c_con->add_option("--horizon", con.horizon, "Survival-probability horizon (time units of the data)")
        ->capture_default_str();
    c_con->add_option("--out", con.out_dir, "Output directory")->required();

    try {
        app.parse(argc, argv);
        if (c_sim->parsed()) {
            survdtr::run_simulate(sim);
        } else if (c_fit->parsed()) {
            fit.impute = parse_impute(fit_impute);
            survdtr::run_fit_dtr(fit);
        } else if (c_ql->parsed()) {
            survdtr::run_qlearn(ql);
        } else if (c_ev->parsed()) {
            survdtr::run_evaluate(ev);
        } else if (c_rep->parsed()) {
            rep.impute = parse_impute(rep_impute);
            survdtr::run_replicate(rep);
        } else if (c_con->parsed()) {
            survdtr::run_contrasts(con);
        }
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
        std::cerr << "error: " << single_line(e.what()) << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << single_line(e.what()) << "\n";
        return 1;
    }
    return 0;
}
