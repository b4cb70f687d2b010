#pragma once

// Exact two-stage survival cohort generators for the two simulation
// scenarios, with noise-free ground truth for evaluation.
//
// Subjects either experience the terminal event in Stage 1 (eta = 0, total
// time t_hat) or enter Stage 2 (eta = 1) after an observed Stage-1 duration
// t1 = t_hat - t2_opt_hat, then accrue a Stage-2 time t2 under the assigned
// action.  Entry to Stage 2 is an observed intermediate event, so
// administrative censoring applies to the terminal phase: the whole follow-up
// for non-entrants, the Stage-2 duration for entrants.

#include <survdtr/dataset.hpp>
#include <survdtr/rng.hpp>

#include <cmath>
#include <stdexcept>
#include <vector>

namespace survdtr {

struct ScenarioConfig {
    int scenario = 1;  // 1 or 2
    int n = 800;
    std::uint64_t seed = 0;

    void validate() const {
        if (scenario != 1 && scenario != 2) throw std::invalid_argument("ScenarioConfig: scenario must be 1 or 2");
        if (n < 1) throw std::invalid_argument("ScenarioConfig: n must be >= 1");
    }
};

// Pre-censoring latent quantities, kept for invariant checks and truth-side
// diagnostics; never written to the cohort CSV.
struct SubjectLatents {
    double t_hat = 0.0;       // total time under (assigned a1, optimal a2)
    double t2_opt_hat = 0.0;  // Stage-2 time under the optimal a2
    double t2 = 0.0;          // Stage-2 time under the assigned a2
    double c = 0.0;           // administrative censoring time
};

struct SimulatedCohort {
    std::vector<TwoStageRow> records;
    std::vector<TruthRow> truth;
    std::vector<SubjectLatents> latents;
    // Stage-2 covariates exist for every subject in the generative model even
    // when Stage 2 is never entered; kept here so a fresh cohort can serve as
    // a full-covariate prediction set.
    std::vector<double> x2_all, b2_all, z2_all;
    int t1_clamps = 0;  // subjects whose Stage-1 time hit the degeneracy clamp
};

struct TrueOptimal {
    int a1_opt = 0;
    int a2_opt = 0;
    double mean_logt2_opt = 0.0;     // E[log t2 | a2_opt], noise-free
    double mean_logtotal_opt = 0.0;  // E[log total | a1_opt, a2 optimal], noise-free
};

namespace detail {

// Conditional mean of log t2 given covariates and the Stage-2 action.
inline double scenario_mean_logt2(int scenario, double x1, double b1, double x2, double b2, double a2) {
    if (scenario == 1) {
        return 4.0 + 0.3 * x2 + b2 - 0.6 * x2 * b2 + 0.3 * x1 + 0.4 * b1 - 0.5 * x1 * b1
             + a2 * (-0.7 + 0.5 * x2 - 0.9 * b2);
    }
    return 4.0 + std::cos(x2 * x2 * x2) - 0.4 * (x2 * b2 + 0.5) * (x2 * b2 + 0.5) - 0.1 * x1
         - std::sin(M_PI * x1 * b1) + a2 * (0.7 * x2 * x2 - 1.0);
}

// Conditional mean of log total time (Stage 2 treated optimally) given the
// Stage-1 action.
inline double scenario_mean_logtotal(int scenario, double x1, double b1, double a1) {
    if (scenario == 1) {
        return 6.3 + 0.7 * x1 + 0.6 * b1 - 0.8 * x1 * b1 + a1 * (0.1 - 0.2 * x1 + 0.6 * b1);
    }
    return 7.4 + std::sin(x1 * x1) + x1 * x1 * x1 * x1 + x1 * b1 + a1 * (0.1 - 0.2 * x1 * x1 * x1);
}

inline double scenario_noise_sd(int scenario) { return scenario == 1 ? 0.3 : 0.1; }

inline int scenario_a2_opt(int scenario, double x2, double b2) {
    const double effect = (scenario == 1) ? (-0.7 + 0.5 * x2 - 0.9 * b2) : (0.7 * x2 * x2 - 1.0);
    return effect > 0.0 ? 1 : 0;
}

inline int scenario_a1_opt(int scenario, double x1, double b1) {
    const double effect = (scenario == 1) ? (0.1 - 0.2 * x1 + 0.6 * b1) : (0.1 - 0.2 * x1 * x1 * x1);
    return effect > 0.0 ? 1 : 0;
}

} // namespace detail

inline TrueOptimal true_optimal_means(int scenario, double x1, double b1, double x2, double b2) {
    if (scenario != 1 && scenario != 2) throw std::invalid_argument("true_optimal_means: scenario must be 1 or 2");
    TrueOptimal t;
    t.a1_opt = detail::scenario_a1_opt(scenario, x1, b1);
    t.a2_opt = detail::scenario_a2_opt(scenario, x2, b2);
    t.mean_logt2_opt = detail::scenario_mean_logt2(scenario, x1, b1, x2, b2, t.a2_opt);
    t.mean_logtotal_opt = detail::scenario_mean_logtotal(scenario, x1, b1, t.a1_opt);
    return t;
}

inline SimulatedCohort generate(const ScenarioConfig& config, RngStream& rng) {
    config.validate();
    const int scen = config.scenario;
    const double sd = detail::scenario_noise_sd(scen);

    SimulatedCohort out;
    out.records.reserve(static_cast<std::size_t>(config.n));
    out.truth.reserve(static_cast<std::size_t>(config.n));
    out.latents.reserve(static_cast<std::size_t>(config.n));

    for (int i = 0; i < config.n; ++i) {
        const double x1 = rng.uniform(0.1, 1.29);
        const double b1 = rng.bernoulli(0.5) ? 1.0 : 0.0;
        const double z1 = rng.normal(10.0, 3.0);
        const double x2 = rng.uniform(0.9, 2.0);
        const double b2 = rng.bernoulli(0.5) ? 1.0 : 0.0;
        const double z2 = rng.normal(20.0, 4.0);
        const int a1 = rng.bernoulli(expit(2.0 * x1 - 1.0)) ? 1 : 0;
        const int eta = rng.bernoulli(0.6) ? 1 : 0;
        const int a2 = rng.bernoulli(expit(-2.0 * x2 + 2.8)) ? 1 : 0;
        const int a2_opt = detail::scenario_a2_opt(scen, x2, b2);

        const double m_total = detail::scenario_mean_logtotal(scen, x1, b1, a1);
        const double m2_assigned = detail::scenario_mean_logt2(scen, x1, b1, x2, b2, a2);
        const double m2_opt = detail::scenario_mean_logt2(scen, x1, b1, x2, b2, a2_opt);

        double t_hat = std::exp(m_total + sd * rng.normal());
        double t2_opt_hat = std::exp(m2_opt + sd * rng.normal());
        double t1 = t_hat - t2_opt_hat;
        if (eta == 1 && t1 <= 0.0) {
            // degenerate Stage-1 duration: redraw this subject's noise pair,
            // then clamp as a last resort
            int tries = 0;
            while (t1 <= 0.0 && tries < 100) {
                t_hat = std::exp(m_total + sd * rng.normal());
                t2_opt_hat = std::exp(m2_opt + sd * rng.normal());
                t1 = t_hat - t2_opt_hat;
                ++tries;
            }
            if (t1 <= 0.0) {
                t1 = 1e-3;
                ++out.t1_clamps;
            }
        }
        const double t2 = std::exp(m2_assigned + sd * rng.normal());
        const double c = (scen == 1) ? rng.uniform(100.0, 2000.0) : rng.uniform(400.0, 5000.0);

        TwoStageRow r;
        r.id = i + 1;
        r.x1 = x1;
        r.b1 = b1;
        r.z1 = z1;
        r.a1 = a1;
        r.eta = eta;
        if (eta == 1) {
            // entry to Stage 2 is an observed intermediate event; censoring
            // falls on the Stage-2 duration
            r.time1 = t1;
            r.delta1 = 1;
            r.x2 = x2;
            r.b2 = b2;
            r.z2 = z2;
            r.a2 = a2;
            r.time2 = std::min(t2, c);
            r.delta2 = (t2 < c) ? 1 : 0;
        } else {
            r.time1 = std::min(t_hat, c);
            r.delta1 = (t_hat < c) ? 1 : 0;
        }
        out.records.push_back(r);

        TruthRow tr;
        tr.id = r.id;
        const auto opt = true_optimal_means(scen, x1, b1, x2, b2);
        tr.a1_opt = opt.a1_opt;
        tr.a2_opt = opt.a2_opt;
        tr.mean_logt2_opt = opt.mean_logt2_opt;
        tr.mean_logtotal_opt = opt.mean_logtotal_opt;
        out.truth.push_back(tr);

        SubjectLatents lat;
        lat.t2_opt_hat = t2_opt_hat;
        lat.t_hat = (eta == 1) ? t1 + t2_opt_hat : t_hat;  // exact bookkeeping identity for entrants
        lat.t2 = t2;
        lat.c = c;
        out.latents.push_back(lat);

        out.x2_all.push_back(x2);
        out.b2_all.push_back(b2);
        out.z2_all.push_back(z2);
    }
    return out;
}

// Prediction rows for evaluating a fitted regime on a fresh cohort: copies of
// the records with the Stage-2 covariate block filled in for every subject
// (actions and Stage-2 times are left as recorded; predictors override the
// action columns themselves).
inline std::vector<TwoStageRow> test_rows(const SimulatedCohort& cohort) {
    std::vector<TwoStageRow> rows = cohort.records;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        rows[i].x2 = cohort.x2_all[i];
        rows[i].b2 = cohort.b2_all[i];
        rows[i].z2 = cohort.z2_all[i];
    }
    return rows;
}

inline SimulatedCohort generate(const ScenarioConfig& config, std::uint64_t stream_id = 0) {
    RngStream rng(config.seed, stream_id);
    return generate(config, rng);
}

} // namespace survdtr
