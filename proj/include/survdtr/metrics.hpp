#pragma once

// Evaluation suite: proportion-of-optimal-treatment, MSE bias/variance
// decomposition, credible-interval coverage, posterior decision rules,
// IPCW time-dependent AUC, and per-subject treatment-contrast scales.

#include <survdtr/dataset.hpp>
#include <survdtr/rng.hpp>
#include <survdtr/stats.hpp>
#include <survdtr/tree.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace survdtr {

using IntMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic>;

struct EvaluationReport {
    double pot_stage1 = 0.0, pot_stage2 = 0.0, pot_overall = 0.0;
    double mse_stage1 = 0.0, bias2_stage1 = 0.0, variance_stage1 = 0.0;
    double mse_stage2 = 0.0, bias2_stage2 = 0.0, variance_stage2 = 0.0;
    double coverage_stage1 = 0.0, coverage_stage2 = 0.0;
};

// Most frequent action per subject across posterior draws; ties break to the
// lowest action code.
inline std::vector<int> posterior_mode_action(const IntMatrix& action_draws) {
    if (action_draws.cols() < 1) throw std::invalid_argument("posterior_mode_action: needs >= 1 draw");
    std::vector<int> out(static_cast<std::size_t>(action_draws.rows()));
    for (Eigen::Index i = 0; i < action_draws.rows(); ++i) {
        std::map<int, int> freq;
        for (Eigen::Index d = 0; d < action_draws.cols(); ++d) ++freq[action_draws(i, d)];
        int best = freq.begin()->first, best_count = freq.begin()->second;
        for (const auto& [action, count] : freq) {  // ascending, so ties keep the lowest
            if (count > best_count) {
                best = action;
                best_count = count;
            }
        }
        out[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

struct PotResult {
    double stage1 = 0.0, stage2 = 0.0, overall = 0.0;
};

inline PotResult pot(const std::vector<int>& pred1, const std::vector<int>& true1,
                     const std::vector<int>& pred2, const std::vector<int>& true2) {
    const auto n = pred1.size();
    if (true1.size() != n || pred2.size() != n || true2.size() != n) {
        throw std::invalid_argument("pot: input length mismatch");
    }
    if (n == 0) throw std::invalid_argument("pot: empty input");
    PotResult r;
    for (std::size_t i = 0; i < n; ++i) {
        const bool m1 = pred1[i] == true1[i];
        const bool m2 = pred2[i] == true2[i];
        r.stage1 += m1;
        r.stage2 += m2;
        r.overall += m1 && m2;
    }
    const double dn = static_cast<double>(n);
    r.stage1 /= dn;
    r.stage2 /= dn;
    r.overall /= dn;
    return r;
}

struct MseDecomposition {
    double mse = 0.0, bias2 = 0.0, variance = 0.0;
};

// estimates: replications x subjects. Per subject, bias^2 of the across-
// replication mean, population variance across replications, and mean squared
// error; aggregated by averaging over subjects (mse = bias2 + variance holds
// per subject by construction).
inline MseDecomposition mse_decomposition(const Matrix& estimates, const Vector& truth) {
    const Eigen::Index R = estimates.rows(), n = estimates.cols();
    if (R < 2) throw std::invalid_argument("mse_decomposition: needs >= 2 replications");
    if (truth.size() != n) throw std::invalid_argument("mse_decomposition: truth length mismatch");
    MseDecomposition out;
    for (Eigen::Index j = 0; j < n; ++j) {
        const double m = estimates.col(j).mean();
        const double b2 = (m - truth(j)) * (m - truth(j));
        const double var = (estimates.col(j).array() - m).square().sum() / static_cast<double>(R);
        const double mse = (estimates.col(j).array() - truth(j)).square().sum() / static_cast<double>(R);
        out.bias2 += b2;
        out.variance += var;
        out.mse += mse;
    }
    out.bias2 /= static_cast<double>(n);
    out.variance /= static_cast<double>(n);
    out.mse /= static_cast<double>(n);
    return out;
}

inline double coverage_rate(const Vector& lo, const Vector& hi, const Vector& truth) {
    const Eigen::Index n = lo.size();
    if (hi.size() != n || truth.size() != n) throw std::invalid_argument("coverage_rate: length mismatch");
    if (n == 0) throw std::invalid_argument("coverage_rate: empty input");
    long covered = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (lo(i) > hi(i)) throw std::invalid_argument("coverage_rate: inverted interval");
        if (lo(i) <= truth(i) && truth(i) <= hi(i)) ++covered;
    }
    return static_cast<double>(covered) / static_cast<double>(n);
}

namespace detail {

// Kaplan-Meier estimator of the censoring survival function G(t): censorings
// are the events, computed over distinct observed times in ascending order.
// Returned as step-function knots; value just after knot k is g[k].
struct ReverseKm {
    std::vector<double> times;  // ascending distinct observed times
    std::vector<double> g;      // G(times[k]) right-continuous

    // right-continuous evaluation G(u)
    double at(double u) const {
        double value = 1.0;
        for (std::size_t k = 0; k < times.size() && times[k] <= u; ++k) value = g[k];
        return value;
    }
    // left limit G(u-)
    double at_left(double u) const {
        double value = 1.0;
        for (std::size_t k = 0; k < times.size() && times[k] < u; ++k) value = g[k];
        return value;
    }
};

inline ReverseKm reverse_km(const Vector& time, const std::vector<int>& delta) {
    const Eigen::Index n = time.size();
    std::vector<double> distinct(time.data(), time.data() + n);
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    ReverseKm km;
    double running = 1.0;
    for (double t : distinct) {
        long at_risk = 0, censored = 0;
        for (Eigen::Index i = 0; i < n; ++i) {
            if (time(i) >= t) ++at_risk;
            if (time(i) == t && delta[static_cast<std::size_t>(i)] == 0) ++censored;
        }
        running *= 1.0 - static_cast<double>(censored) / static_cast<double>(at_risk);
        km.times.push_back(t);
        km.g.push_back(running);
    }
    return km;
}

} // namespace detail

// Cumulative-case / dynamic-control AUC at t_star with inverse-probability-
// of-censoring weights from the Kaplan-Meier estimator of the censoring
// distribution.  Cases are events by t_star weighted by 1/G(T-); controls are
// subjects still at risk after t_star weighted by 1/G(t_star), with the
// censoring survival evaluated no later than the largest event time.  Higher
// marker means longer predicted survival, so a case scoring below a control
// is concordant.
inline double time_dependent_auc(const Vector& marker, const Vector& time, const std::vector<int>& delta,
                                 double t_star) {
    const Eigen::Index n = marker.size();
    if (time.size() != n || static_cast<Eigen::Index>(delta.size()) != n) {
        throw std::invalid_argument("time_dependent_auc: length mismatch");
    }
    if (!(t_star > 0.0)) throw std::invalid_argument("time_dependent_auc: t_star must be positive");
    for (Eigen::Index i = 0; i < n; ++i) {
        const int di = delta[static_cast<std::size_t>(i)];
        if (di != 0 && di != 1) throw std::invalid_argument("time_dependent_auc: delta must be 0 or 1");
    }

    double largest_event = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < n; ++i) {
        if (delta[static_cast<std::size_t>(i)] == 1) largest_event = std::max(largest_event, time(i));
    }

    std::vector<Eigen::Index> cases, controls;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (time(i) <= t_star && delta[static_cast<std::size_t>(i)] == 1) cases.push_back(i);
        if (time(i) > t_star) controls.push_back(i);
    }
    if (cases.empty()) throw std::runtime_error("time_dependent_auc: no cases by t_star");
    if (controls.empty()) throw std::runtime_error("time_dependent_auc: no controls after t_star");

    const auto km = detail::reverse_km(time, delta);
    const double control_weight = 1.0 / km.at(std::min(t_star, largest_event));

    long double numerator = 0.0L, case_mass = 0.0L;
    for (const Eigen::Index i : cases) {
        const double wi = 1.0 / km.at_left(time(i));
        case_mass += wi;
        long double credit = 0.0L;
        for (const Eigen::Index j : controls) {
            if (marker(i) < marker(j)) {
                credit += control_weight;
            } else if (marker(i) == marker(j)) {
                credit += 0.5L * control_weight;
            }
        }
        numerator += wi * credit;
    }
    const long double control_mass = static_cast<long double>(control_weight) * controls.size();
    return static_cast<double>(numerator / (case_mass * control_mass));
}

// ------------------------------------------------------------------------
// Treatment contrasts between action 1 and action 0 on three scales
// ------------------------------------------------------------------------

struct ContrastSummary {
    Vector mean, q025, q25, q75, q975;  // per subject, original order
};

struct PosteriorContrasts {
    Matrix dlog, dmedian, dsurv;     // subjects x draws, original order
    ContrastSummary summary_dlog, summary_dmedian, summary_dsurv;
    std::vector<int> waterfall;      // subject indices, descending posterior mean dlog
};

// m1, m0: subjects x draws of posterior mean log time under actions 1 and 0;
// sigma: per-draw error scale; horizon: survival-probability horizon (months).
inline PosteriorContrasts posterior_contrasts(const Matrix& m1, const Matrix& m0, const Vector& sigma,
                                              double horizon) {
    if (!(horizon > 0.0)) throw std::invalid_argument("posterior_contrasts: horizon must be positive");
    const Eigen::Index n = m1.rows(), keep = m1.cols();
    if (m0.rows() != n || m0.cols() != keep) {
        throw std::invalid_argument("posterior_contrasts: action matrices must agree in shape");
    }
    if (sigma.size() != keep) throw std::invalid_argument("posterior_contrasts: sigma length mismatch");
    if (keep < 1) throw std::invalid_argument("posterior_contrasts: needs >= 1 draw");
    const double log_h = std::log(horizon);

    PosteriorContrasts out;
    out.dlog.resize(n, keep);
    out.dmedian.resize(n, keep);
    out.dsurv.resize(n, keep);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index d = 0; d < keep; ++d) {
            out.dlog(i, d) = m1(i, d) - m0(i, d);
            out.dmedian(i, d) = std::exp(m1(i, d)) - std::exp(m0(i, d));
            out.dsurv(i, d) =
                normal_cdf((m1(i, d) - log_h) / sigma(d)) - normal_cdf((m0(i, d) - log_h) / sigma(d));
        }
    }

    auto summarize = [n, keep](const Matrix& draws) {
        ContrastSummary s;
        s.mean.resize(n);
        s.q025.resize(n);
        s.q25.resize(n);
        s.q75.resize(n);
        s.q975.resize(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            std::vector<double> row(static_cast<std::size_t>(keep));
            for (Eigen::Index d = 0; d < keep; ++d) row[static_cast<std::size_t>(d)] = draws(i, d);
            s.mean(i) = mean_of(row);
            s.q025(i) = quantile_type7(row, 0.025);
            s.q25(i) = quantile_type7(row, 0.25);
            s.q75(i) = quantile_type7(row, 0.75);
            s.q975(i) = quantile_type7(row, 0.975);
        }
        return s;
    };
    out.summary_dlog = summarize(out.dlog);
    out.summary_dmedian = summarize(out.dmedian);
    out.summary_dsurv = summarize(out.dsurv);

    out.waterfall.resize(static_cast<std::size_t>(n));
    std::iota(out.waterfall.begin(), out.waterfall.end(), 0);
    const Vector& key = out.summary_dlog.mean;
    std::stable_sort(out.waterfall.begin(), out.waterfall.end(),
                     [&key](int a, int b) { return key(a) > key(b); });
    return out;
}

// ------------------------------------------------------------------------
// Marginal survival data with suboptimal Stage-2 treatment treated as
// censoring at Stage-2 entry
// ------------------------------------------------------------------------

struct SuboptimalCensored {
    Vector time;
    std::vector<int> delta;
};

// a2_rule holds one action per entrant, in record order.  Entrants whose
// observed Stage-2 action disagrees with the rule are censored at their
// Stage-2 entry time; everyone else keeps their total-time observation.
inline SuboptimalCensored suboptimal_censor_stage1(const std::vector<TwoStageRow>& records,
                                                   const std::vector<int>& a2_rule) {
    std::size_t n_entrants = 0;
    for (const auto& r : records) n_entrants += r.is_entrant();
    if (a2_rule.size() != n_entrants) {
        throw std::invalid_argument("suboptimal_censor_stage1: one rule action per entrant required");
    }
    SuboptimalCensored out;
    out.time.resize(static_cast<Eigen::Index>(records.size()));
    out.delta.resize(records.size());
    std::size_t e = 0;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        if (!r.is_entrant()) {
            out.time(static_cast<Eigen::Index>(i)) = r.time1;
            out.delta[i] = r.delta1;
        } else if (r.a2 == a2_rule[e++]) {
            out.time(static_cast<Eigen::Index>(i)) = r.time1 + r.time2;
            out.delta[i] = r.delta2;
        } else {
            out.time(static_cast<Eigen::Index>(i)) = r.time1;
            out.delta[i] = 0;
        }
    }
    return out;
}

} // namespace survdtr
