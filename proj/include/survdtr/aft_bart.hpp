#pragma once

// Log-normal accelerated-failure-time layer over the sum-of-trees sampler:
// log t = offset_mu + f(x) + sigma * eps with right-censored observations
// imputed each sweep from the model's truncated normal, then a plain
// regression sweep on the completed log-time vector.

#include <survdtr/bart.hpp>
#include <survdtr/rng.hpp>
#include <survdtr/tree.hpp>

#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace survdtr {

struct SurvivalRecord {
    std::vector<double> x;  // covariates
    double s = 0.0;         // observed time: event time or censoring time
    int delta = 1;          // 1 = event, 0 = right-censored
};

// One kept posterior draw: a standalone forest snapshot plus its sigma.
struct ForestDraw {
    std::vector<Tree> forest;
    double sigma = 0.0;
};

struct AftBartFit {
    std::vector<ForestDraw> draws;
    double offset_mu = 0.0;
    int n_burn = 0;
    int n_keep = 0;
    Eigen::Index n_cols = 0;
    std::vector<std::string> schema;   // optional covariate names
    double geweke_sigma_z = 0.0;       // convergence report on the sigma chain; never gates
};

// Crude two-window Geweke score: first 10% vs last 50% of the chain with
// iid variance estimates.  Diagnostic output only.
inline double geweke_z(const std::vector<double>& chain) {
    const std::size_t n = chain.size();
    if (n < 20) return 0.0;
    const std::size_t na = std::max<std::size_t>(1, n / 10);
    const std::size_t nb = n / 2;
    auto window = [&](std::size_t lo, std::size_t hi) {
        double m = 0.0;
        for (std::size_t i = lo; i < hi; ++i) m += chain[i];
        m /= static_cast<double>(hi - lo);
        double v = 0.0;
        for (std::size_t i = lo; i < hi; ++i) v += (chain[i] - m) * (chain[i] - m);
        v /= static_cast<double>(hi - lo - 1);
        return std::pair<double, double>(m, v);
    };
    const auto [ma, va] = window(0, na);
    const auto [mb, vb] = window(n - nb, n);
    const double denom = std::sqrt(va / static_cast<double>(na) + vb / static_cast<double>(nb));
    return (denom > 0.0) ? (ma - mb) / denom : 0.0;
}

// Invoked after each sweep's imputation with the completed log-time vector;
// lets tests assert the truncation and event-invariance properties in place.
using AftSweepObserver = std::function<void(int sweep, const Vector& completed_log_t)>;

inline AftBartFit fit_aft_bart(const std::vector<SurvivalRecord>& records, const BartHyper& hyper,
                               int burn, int keep, RngStream& rng,
                               std::vector<std::string> schema = {},
                               const AftSweepObserver& observer = {}) {
    hyper.validate();
    if (records.empty()) throw std::invalid_argument("fit_aft_bart: no records");
    if (burn < 0 || keep < 1) throw std::invalid_argument("fit_aft_bart: need burn >= 0 and keep >= 1");
    const std::size_t p = records.front().x.size();
    int n_events = 0;
    for (const auto& r : records) {
        if (r.x.size() != p) throw std::invalid_argument("fit_aft_bart: ragged covariate rows");
        if (!(r.s > 0.0)) throw std::invalid_argument("fit_aft_bart: observed times must be positive");
        if (r.delta != 0 && r.delta != 1) throw std::invalid_argument("fit_aft_bart: delta must be 0 or 1");
        n_events += r.delta;
    }
    if (n_events == 0) throw std::runtime_error("fit_aft_bart: zero events; sigma is unidentifiable");
    if (!schema.empty() && schema.size() != p) throw std::invalid_argument("fit_aft_bart: schema length mismatch");

    const auto n = static_cast<Eigen::Index>(records.size());
    Matrix X(n, static_cast<Eigen::Index>(p));
    Vector log_s(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& r = records[static_cast<std::size_t>(i)];
        for (std::size_t j = 0; j < p; ++j) X(i, static_cast<Eigen::Index>(j)) = r.x[j];
        log_s(i) = std::log(r.s);
    }

    // centering and prior calibration use the naive log s vector (censored
    // values treated as events); offset stays fixed across sweeps
    auto st = init_state(log_s, X, hyper);
    const auto cuts = build_cutpoints(X, hyper.numcut);

    Vector y = log_s;
    AftBartFit fit;
    fit.offset_mu = st.offset_mu;
    fit.n_burn = burn;
    fit.n_keep = keep;
    fit.n_cols = X.cols();
    fit.schema = std::move(schema);
    fit.draws.reserve(static_cast<std::size_t>(keep));
    std::vector<double> sigma_chain;
    sigma_chain.reserve(static_cast<std::size_t>(keep));

    for (int sweep = 0; sweep < burn + keep; ++sweep) {
        const double sigma = std::sqrt(st.sigma2);
        for (Eigen::Index i = 0; i < n; ++i) {
            if (records[static_cast<std::size_t>(i)].delta == 1) continue;
            const double mean = st.offset_mu + st.total_fit[static_cast<std::size_t>(i)];
            y(i) = rng.truncated_normal_lower(mean, sigma, log_s(i));
        }
        if (observer) observer(sweep, y);
        gibbs_step(st, y, X, hyper, cuts, rng);
        if (sweep >= burn) {
            fit.draws.push_back(ForestDraw{st.forest, std::sqrt(st.sigma2)});
            sigma_chain.push_back(std::sqrt(st.sigma2));
        }
    }
    fit.geweke_sigma_z = geweke_z(sigma_chain);
    return fit;
}

inline AftBartFit fit_aft_bart(const std::vector<SurvivalRecord>& records, const BartHyper& hyper,
                               RngStream& rng) {
    return fit_aft_bart(records, hyper, 1000, 1000, rng);
}

// Posterior mean log event time per draw per row (no residual noise).
inline Matrix posterior_mean_logt(const AftBartFit& fit, const Matrix& X_new) {
    if (X_new.cols() != fit.n_cols) throw std::invalid_argument("posterior_mean_logt: covariate count differs from training schema");
    Matrix out(static_cast<Eigen::Index>(fit.draws.size()), X_new.rows());
    for (std::size_t d = 0; d < fit.draws.size(); ++d) {
        out.row(static_cast<Eigen::Index>(d)) = predict(fit.draws[d].forest, fit.offset_mu, X_new).transpose();
    }
    return out;
}

// One posterior-predictive event time from a single kept draw; optionally
// truncated below at a known survival time (for subjects already observed
// beyond it).
inline double posterior_predictive_time(const AftBartFit& fit, int draw_index, const std::vector<double>& x,
                                        std::optional<double> lower_bound, RngStream& rng) {
    if (draw_index < 0 || draw_index >= static_cast<int>(fit.draws.size())) {
        throw std::invalid_argument("posterior_predictive_time: draw_index out of range");
    }
    if (static_cast<Eigen::Index>(x.size()) != fit.n_cols) {
        throw std::invalid_argument("posterior_predictive_time: covariate count differs from training schema");
    }
    const auto& draw = fit.draws[static_cast<std::size_t>(draw_index)];
    double mean = fit.offset_mu;
    for (const auto& tree : draw.forest) mean += tree.evaluate(x);
    if (lower_bound) {
        if (!(*lower_bound > 0.0)) throw std::invalid_argument("posterior_predictive_time: lower_bound must be positive");
        return std::exp(rng.truncated_normal_lower(mean, draw.sigma, std::log(*lower_bound)));
    }
    return std::exp(rng.normal(mean, draw.sigma));
}

} // namespace survdtr
