#pragma once

// Two-stage optimal dynamic treatment regime from right-censored data by
// backward induction with an AFT survival BART model at each stage:
//   Step 1  fit Stage 2 on entrants,
//   Step 2  per posterior draw, pick each entrant's optimal Stage-2 action
//           and impute the time they would have attained under it,
//   Step 3  fit one independent Stage-1 chain per augmented dataset and keep
//           a single draw from each,
//   Step 4  per draw, pick each subject's optimal Stage-1 action.

#include <survdtr/aft_bart.hpp>
#include <survdtr/dataset.hpp>
#include <survdtr/metrics.hpp>
#include <survdtr/parallel.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace survdtr {

enum class ImputeMode { event, censored };

struct DtrConfig {
    BartHyper hyper;
    int burn = 1000;   // Stage-2 chain burn-in
    int keep = 1000;   // kept draws = number of Stage-1 chains
    int burn1 = 250;   // per-chain Stage-1 burn-in
    ImputeMode impute = ImputeMode::event;
    std::uint64_t seed = 0;
    int threads = 1;

    void validate() const {
        hyper.validate();
        if (burn < 0 || burn1 < 0) throw std::invalid_argument("DtrConfig: burn-in must be >= 0");
        if (keep < 1) throw std::invalid_argument("DtrConfig: keep must be >= 1");
        if (threads < 1) throw std::invalid_argument("DtrConfig: threads must be >= 1");
    }
};

// Stage-1 chains use rng stream ids 0..keep-1; the remaining pipeline stages
// use purpose-tagged streams far above any chain index.
constexpr std::uint64_t kStage2FitStream = std::uint64_t{1} << 48;
constexpr std::uint64_t kStage2SampleStream = std::uint64_t{2} << 48;

// Stage-2 history predictors: everything accumulated before the Stage-2
// action, Stage-1 payoff included.
inline std::vector<double> stage2_covariates(const TwoStageRow& r, int a2) {
    return {r.x1, r.b1, r.z1, static_cast<double>(r.a1), r.time1,
            r.x2, r.b2, r.z2, static_cast<double>(a2)};
}

inline std::vector<std::string> stage2_schema() {
    return {"x1", "b1", "z1", "a1", "time1", "x2", "b2", "z2", "a2"};
}

// Stage-1 predictors: baseline covariates and the Stage-1 action only.
inline std::vector<double> stage1_covariates(const TwoStageRow& r, int a1) {
    return {r.x1, r.b1, r.z1, static_cast<double>(a1)};
}

inline std::vector<std::string> stage1_schema() {
    return {"x1", "b1", "z1", "a1"};
}

// Step 1: AFT survival BART on the entrants' Stage-2 durations.
inline AftBartFit fit_stage2(const std::vector<TwoStageRow>& records, const BartHyper& hyper, int burn,
                             int keep, RngStream& rng) {
    std::vector<SurvivalRecord> data;
    for (const auto& r : records) {
        if (!r.is_entrant()) continue;
        SurvivalRecord row;
        row.x = stage2_covariates(r, r.a2);
        row.s = r.time2;
        row.delta = r.delta2;
        data.push_back(std::move(row));
    }
    if (data.empty()) throw std::runtime_error("fit_stage2: cohort has no Stage-2 entrants");
    return fit_aft_bart(data, hyper, burn, keep, rng, stage2_schema());
}

// Per-(row, draw) argmax over per-action prediction matrices; ties break to
// the lowest action code (maps iterate ascending).
inline IntMatrix argmax_by_action(const std::map<int, Matrix>& by_action) {
    if (by_action.empty()) throw std::invalid_argument("argmax_by_action: no actions");
    auto it = by_action.begin();
    IntMatrix best = IntMatrix::Constant(it->second.rows(), it->second.cols(), it->first);
    Matrix value = it->second;
    for (++it; it != by_action.end(); ++it) {
        for (Eigen::Index d = 0; d < value.cols(); ++d) {
            for (Eigen::Index i = 0; i < value.rows(); ++i) {
                if (it->second(i, d) > value(i, d)) {
                    value(i, d) = it->second(i, d);
                    best(i, d) = it->first;
                }
            }
        }
    }
    return best;
}

// Value matrix at each (row, draw)'s chosen action.
inline Matrix chosen_values(const std::map<int, Matrix>& by_action, const IntMatrix& chosen) {
    Matrix out(chosen.rows(), chosen.cols());
    for (Eigen::Index d = 0; d < chosen.cols(); ++d) {
        for (Eigen::Index i = 0; i < chosen.rows(); ++i) {
            out(i, d) = by_action.at(chosen(i, d))(i, d);
        }
    }
    return out;
}

struct Stage2Samples {
    std::vector<std::size_t> entrant_rows;  // indices into the cohort records
    std::vector<int> action_set;            // distinct observed Stage-2 codes, ascending
    std::map<int, Matrix> yhat_by_action;   // entrants x keep, mean log t2 per action
    IntMatrix a2_opt;                       // entrants x keep
    Matrix t2_opt;                          // entrants x keep, imputed optimal Stage-2 time
};

// Steps 2a-2c: per kept draw, each entrant's optimal Stage-2 action and the
// Stage-2 time they would attain under it:
//   (i)  observed at the optimum with an event: keep s2 exactly;
//   (ii) observed at the optimum but censored: posterior-predictive draw
//        truncated below at s2;
//   (iii) observed off the optimum: untruncated posterior-predictive draw for
//        the counterfactual action.
inline Stage2Samples sample_stage2_optimal(const AftBartFit& fit2, const std::vector<TwoStageRow>& records,
                                           RngStream& rng) {
    Stage2Samples out;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (records[i].is_entrant()) out.entrant_rows.push_back(i);
    }
    if (out.entrant_rows.empty()) {
        throw std::runtime_error("sample_stage2_optimal: cohort has no Stage-2 entrants");
    }
    {
        std::set<int> codes;
        for (const auto idx : out.entrant_rows) codes.insert(records[idx].a2);
        out.action_set.assign(codes.begin(), codes.end());
    }
    const auto n_entrants = static_cast<Eigen::Index>(out.entrant_rows.size());
    const auto keep = static_cast<Eigen::Index>(fit2.draws.size());

    for (const int a : out.action_set) {
        Matrix X(n_entrants, static_cast<Eigen::Index>(stage2_schema().size()));
        for (Eigen::Index e = 0; e < n_entrants; ++e) {
            const auto cov = stage2_covariates(records[out.entrant_rows[static_cast<std::size_t>(e)]], a);
            for (std::size_t c = 0; c < cov.size(); ++c) X(e, static_cast<Eigen::Index>(c)) = cov[c];
        }
        out.yhat_by_action[a] = posterior_mean_logt(fit2, X).transpose();  // entrants x keep
    }
    out.a2_opt = argmax_by_action(out.yhat_by_action);

    out.t2_opt.resize(n_entrants, keep);
    for (Eigen::Index d = 0; d < keep; ++d) {
        const double sigma_d = fit2.draws[static_cast<std::size_t>(d)].sigma;
        for (Eigen::Index e = 0; e < n_entrants; ++e) {
            const auto& r = records[out.entrant_rows[static_cast<std::size_t>(e)]];
            const int best = out.a2_opt(e, d);
            if (r.a2 == best && r.delta2 == 1) {
                out.t2_opt(e, d) = r.time2;  // case (i): the observation is the optimal outcome
            } else {
                const double mean = out.yhat_by_action.at(best)(e, d);
                if (r.a2 == best) {
                    // case (ii): survived past s2 under the optimal action
                    out.t2_opt(e, d) = std::exp(rng.truncated_normal_lower(mean, sigma_d, std::log(r.time2)));
                } else {
                    // case (iii): counterfactual action, no observed bound
                    out.t2_opt(e, d) = std::exp(rng.normal(mean, sigma_d));
                }
            }
        }
    }
    return out;
}

// Step 2d: one augmented Stage-1 dataset from draw d.  Entrants become
// events at t1 + t2_opt; under `censored` mode the case-(ii) entrants are
// instead passed through as censored at t1 + s2.  Non-entrants are copied
// unchanged.
inline std::vector<SurvivalRecord> build_stage1_dataset(const std::vector<TwoStageRow>& records,
                                                        const Stage2Samples& stage2, Eigen::Index d,
                                                        ImputeMode mode) {
    std::vector<SurvivalRecord> out;
    out.reserve(records.size());
    Eigen::Index e = 0;
    for (const auto& r : records) {
        SurvivalRecord row;
        row.x = stage1_covariates(r, r.a1);
        if (!r.is_entrant()) {
            row.s = r.time1;
            row.delta = r.delta1;
        } else {
            const bool censored_at_optimum = r.a2 == stage2.a2_opt(e, d) && r.delta2 == 0;
            if (mode == ImputeMode::censored && censored_at_optimum) {
                row.s = r.time1 + r.time2;
                row.delta = 0;
            } else {
                row.s = r.time1 + stage2.t2_opt(e, d);
                row.delta = 1;
            }
            ++e;
        }
        out.push_back(std::move(row));
    }
    return out;
}

// Step 3: one independent AFT-BART chain per augmented dataset, one kept
// draw each.  Chain k draws from RngStream(seed, k), so the ensemble is a
// pure function of (datasets, hyper, burn1, seed) regardless of thread count.
inline std::vector<AftBartFit> fit_stage1_ensemble(const std::vector<std::vector<SurvivalRecord>>& datasets,
                                                   const BartHyper& hyper, int burn1, std::uint64_t seed,
                                                   int n_threads) {
    std::vector<AftBartFit> fits(datasets.size());
    parallel_for(datasets.size(), n_threads, [&](std::size_t k) {
        RngStream rng(seed, static_cast<std::uint64_t>(k));
        fits[k] = fit_aft_bart(datasets[k], hyper, burn1, 1, rng, stage1_schema());
    });
    return fits;
}

struct DtrPosterior {
    std::vector<std::size_t> entrant_rows;
    std::vector<int> action_set1, action_set2;

    IntMatrix a2_opt;                       // entrants x keep
    std::map<int, Matrix> yhat2_by_action;  // entrants x keep
    Matrix t2_opt;                          // entrants x keep
    Vector sigma2_draws;                    // keep

    IntMatrix a1_opt;                       // n x keep
    std::map<int, Matrix> yhat1_by_action;  // n x keep
    Vector sigma1_draws;                    // keep

    // new-data blocks; empty unless prediction rows were supplied
    IntMatrix a2_opt_new;
    std::map<int, Matrix> yhat2_by_action_new;
    IntMatrix a1_opt_new;
    std::map<int, Matrix> yhat1_by_action_new;
};

namespace detail {

inline void check_newdata(const std::vector<TwoStageRow>& newdata) {
    for (std::size_t i = 0; i < newdata.size(); ++i) {
        const auto& r = newdata[i];
        const bool ok = std::isfinite(r.x1) && std::isfinite(r.b1) && std::isfinite(r.z1) &&
                        std::isfinite(r.time1) && r.time1 > 0.0 && std::isfinite(r.x2) &&
                        std::isfinite(r.b2) && std::isfinite(r.z2);
        if (!ok) {
            throw std::invalid_argument("optimize_dtr: newdata row " + std::to_string(i) +
                                        " must supply positive time1 and the full covariate block");
        }
    }
}

// Per-action Stage-2 posterior means for arbitrary rows (full covariates).
inline std::map<int, Matrix> stage2_predictions(const AftBartFit& fit2, const std::vector<TwoStageRow>& rows,
                                                const std::vector<int>& action_set) {
    std::map<int, Matrix> out;
    for (const int a : action_set) {
        Matrix X(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(stage2_schema().size()));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const auto cov = stage2_covariates(rows[i], a);
            for (std::size_t c = 0; c < cov.size(); ++c) {
                X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = cov[c];
            }
        }
        out[a] = posterior_mean_logt(fit2, X).transpose();
    }
    return out;
}

// Per-action Stage-1 posterior means across the chain ensemble: column d
// comes from chain d's single kept draw (its own training offset included).
inline std::map<int, Matrix> stage1_predictions(const std::vector<AftBartFit>& fits1,
                                                const std::vector<TwoStageRow>& rows,
                                                const std::vector<int>& action_set) {
    const auto n = static_cast<Eigen::Index>(rows.size());
    const auto keep = static_cast<Eigen::Index>(fits1.size());
    std::map<int, Matrix> out;
    for (const int a : action_set) {
        Matrix X(n, static_cast<Eigen::Index>(stage1_schema().size()));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const auto cov = stage1_covariates(rows[i], a);
            for (std::size_t c = 0; c < cov.size(); ++c) {
                X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = cov[c];
            }
        }
        Matrix m(n, keep);
        for (Eigen::Index d = 0; d < keep; ++d) {
            const auto& fit = fits1[static_cast<std::size_t>(d)];
            m.col(d) = predict(fit.draws[0].forest, fit.offset_mu, X);
        }
        out[a] = std::move(m);
    }
    return out;
}

} // namespace detail

// Step 4 wrapper: the full backward-induction pipeline.
inline DtrPosterior optimize_dtr(const std::vector<TwoStageRow>& records,
                                 const std::vector<TwoStageRow>& newdata, const DtrConfig& config) {
    config.validate();
    detail::check_newdata(newdata);

    RngStream rng_fit2(config.seed, kStage2FitStream);
    const AftBartFit fit2 = fit_stage2(records, config.hyper, config.burn, config.keep, rng_fit2);

    RngStream rng_sample2(config.seed, kStage2SampleStream);
    Stage2Samples stage2 = sample_stage2_optimal(fit2, records, rng_sample2);

    std::vector<std::vector<SurvivalRecord>> datasets;
    datasets.reserve(static_cast<std::size_t>(config.keep));
    for (Eigen::Index d = 0; d < config.keep; ++d) {
        datasets.push_back(build_stage1_dataset(records, stage2, d, config.impute));
    }
    const std::vector<AftBartFit> fits1 =
        fit_stage1_ensemble(datasets, config.hyper, config.burn1, config.seed, config.threads);

    DtrPosterior post;
    post.entrant_rows = std::move(stage2.entrant_rows);
    post.action_set2 = std::move(stage2.action_set);
    post.yhat2_by_action = std::move(stage2.yhat_by_action);
    post.a2_opt = std::move(stage2.a2_opt);
    post.t2_opt = std::move(stage2.t2_opt);
    post.sigma2_draws.resize(static_cast<Eigen::Index>(fit2.draws.size()));
    for (std::size_t d = 0; d < fit2.draws.size(); ++d) {
        post.sigma2_draws(static_cast<Eigen::Index>(d)) = fit2.draws[d].sigma;
    }

    {
        std::set<int> codes;
        for (const auto& r : records) codes.insert(r.a1);
        post.action_set1.assign(codes.begin(), codes.end());
    }
    post.yhat1_by_action = detail::stage1_predictions(fits1, records, post.action_set1);
    post.a1_opt = argmax_by_action(post.yhat1_by_action);
    post.sigma1_draws.resize(static_cast<Eigen::Index>(fits1.size()));
    for (std::size_t d = 0; d < fits1.size(); ++d) {
        post.sigma1_draws(static_cast<Eigen::Index>(d)) = fits1[d].draws[0].sigma;
    }

    if (!newdata.empty()) {
        post.yhat2_by_action_new = detail::stage2_predictions(fit2, newdata, post.action_set2);
        post.a2_opt_new = argmax_by_action(post.yhat2_by_action_new);
        post.yhat1_by_action_new = detail::stage1_predictions(fits1, newdata, post.action_set1);
        post.a1_opt_new = argmax_by_action(post.yhat1_by_action_new);
    }
    return post;
}

} // namespace survdtr
