#pragma once

// Parametric comparator: censored log-normal AFT regression fit by damped
// Newton maximum likelihood, two-stage Q-learning backward induction over a
// formula-specified linear model, and subject-level bootstrap uncertainty.

#include <survdtr/dataset.hpp>
#include <survdtr/rng.hpp>
#include <survdtr/stats.hpp>
#include <survdtr/tree.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace survdtr {

// ------------------------------------------------------------------------
// Formula mini-language: terms separated by '+', products by '*', implicit
// intercept.  Example: "x1 + b1 + x1*b1 + a1 + a1*x1 + a1*b1".
// ------------------------------------------------------------------------

struct ModelFormula {
    std::vector<std::vector<std::string>> terms;  // each term: factor column names

    static ModelFormula parse(const std::string& text);
    std::string term_name(std::size_t k) const {
        std::string s;
        for (std::size_t f = 0; f < terms[k].size(); ++f) {
            if (f) s += "*";
            s += terms[k][f];
        }
        return s;
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_on(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(sep, start);
        if (pos == std::string::npos) {
            out.push_back(trim(s.substr(start)));
            break;
        }
        out.push_back(trim(s.substr(start, pos - start)));
        start = pos + 1;
    }
    return out;
}

} // namespace detail

inline ModelFormula ModelFormula::parse(const std::string& text) {
    ModelFormula f;
    std::set<std::vector<std::string>> seen;
    for (const auto& chunk : detail::split_on(text, '+')) {
        if (chunk.empty()) throw std::invalid_argument("formula: empty term in '" + text + "'");
        std::vector<std::string> factors = detail::split_on(chunk, '*');
        for (const auto& fac : factors) {
            if (fac.empty()) throw std::invalid_argument("formula: empty factor in term '" + chunk + "'");
        }
        std::vector<std::string> key = factors;
        std::sort(key.begin(), key.end());
        if (!seen.insert(key).second) throw std::invalid_argument("formula: duplicate term '" + chunk + "'");
        f.terms.push_back(std::move(factors));
    }
    if (f.terms.empty()) throw std::invalid_argument("formula: no terms in '" + text + "'");
    return f;
}

// Named columns over one set of rows.
using Frame = std::map<std::string, std::vector<double>>;

inline std::size_t frame_rows(const Frame& frame) {
    if (frame.empty()) throw std::invalid_argument("frame: no columns");
    return frame.begin()->second.size();
}

// Intercept column plus one column per term (products elementwise).
inline Matrix build_design(const ModelFormula& formula, const Frame& frame) {
    const auto n = static_cast<Eigen::Index>(frame_rows(frame));
    Matrix X(n, static_cast<Eigen::Index>(formula.terms.size()) + 1);
    X.col(0).setOnes();
    for (std::size_t k = 0; k < formula.terms.size(); ++k) {
        Vector col = Vector::Ones(n);
        for (const auto& name : formula.terms[k]) {
            const auto it = frame.find(name);
            if (it == frame.end()) throw std::invalid_argument("formula: unknown column '" + name + "'");
            if (static_cast<Eigen::Index>(it->second.size()) != n) {
                throw std::invalid_argument("formula: column length mismatch for '" + name + "'");
            }
            for (Eigen::Index i = 0; i < n; ++i) col(i) *= it->second[static_cast<std::size_t>(i)];
        }
        X.col(static_cast<Eigen::Index>(k) + 1) = col;
    }
    return X;
}

inline std::vector<std::string> design_column_names(const ModelFormula& formula) {
    std::vector<std::string> names = {"(intercept)"};
    for (std::size_t k = 0; k < formula.terms.size(); ++k) names.push_back(formula.term_name(k));
    return names;
}

// ------------------------------------------------------------------------
// Censored log-normal AFT maximum likelihood
// ------------------------------------------------------------------------

struct LognormalAftFit {
    Vector beta;             // design-column coefficients, log-time units
    double log_scale = 0.0;  // log sigma
    Matrix hessian_inverse;  // asymptotic covariance of (beta, log_scale)
    bool converged = false;
    int n_iter = 0;
    double loglik = 0.0;

    double scale() const { return std::exp(log_scale); }
};

namespace detail {

struct LognormalDerivs {
    double ll;
    Vector grad;   // d ll / d (beta, tau), tau = log sigma
    Matrix hess;   // second derivatives, same ordering
};

inline LognormalDerivs lognormal_derivs(const Matrix& X, const Vector& log_s,
                                        const std::vector<int>& delta, const Vector& beta, double tau) {
    const Eigen::Index n = X.rows(), p = X.cols();
    const double sigma = std::exp(tau);
    LognormalDerivs d;
    d.ll = 0.0;
    d.grad = Vector::Zero(p + 1);
    d.hess = Matrix::Zero(p + 1, p + 1);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double z = (log_s(i) - X.row(i).dot(beta)) / sigma;
        const Vector xi = X.row(i).transpose();
        if (delta[static_cast<std::size_t>(i)] == 1) {
            d.ll += normal_logpdf(z) - tau;
            d.grad.head(p) += (z / sigma) * xi;
            d.grad(p) += z * z - 1.0;
            d.hess.topLeftCorner(p, p) -= xi * xi.transpose() / (sigma * sigma);
            d.hess.col(p).head(p) += (-2.0 * z / sigma) * xi;
            d.hess(p, p) += -2.0 * z * z;
        } else {
            d.ll += normal_logsf(z);
            const double h = normal_hazard(z);
            d.grad.head(p) += (h / sigma) * xi;
            d.grad(p) += h * z;
            d.hess.topLeftCorner(p, p) -= h * (h - z) / (sigma * sigma) * (xi * xi.transpose());
            d.hess.col(p).head(p) += (-(z * h * (h - z) + h) / sigma) * xi;
            d.hess(p, p) += -z * z * h * (h - z) - z * h;
        }
    }
    d.hess.row(p).head(p) = d.hess.col(p).head(p).transpose();
    return d;
}

} // namespace detail

inline LognormalAftFit fit_lognormal_aft(const Matrix& X, const Vector& s, const std::vector<int>& delta) {
    const Eigen::Index n = X.rows(), p = X.cols();
    if (s.size() != n || static_cast<Eigen::Index>(delta.size()) != n) {
        throw std::invalid_argument("fit_lognormal_aft: row count mismatch");
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        if (!(s(i) > 0.0)) throw std::invalid_argument("fit_lognormal_aft: times must be positive");
        const int di = delta[static_cast<std::size_t>(i)];
        if (di != 0 && di != 1) throw std::invalid_argument("fit_lognormal_aft: delta must be 0 or 1");
    }
    const long n_events = std::count(delta.begin(), delta.end(), 1);
    if (n_events < p + 1) {
        throw std::runtime_error("fit_lognormal_aft: needs at least " + std::to_string(p + 1) +
                                 " events, have " + std::to_string(n_events));
    }
    {
        Eigen::BDCSVD<Matrix> svd(X);
        if (svd.singularValues()(svd.singularValues().size() - 1) <= 1e-10) {
            throw std::runtime_error("fit_lognormal_aft: design matrix is rank deficient");
        }
    }

    Vector log_s = s.array().log().matrix();

    // start: least squares over event rows, log sd of event log-times
    Matrix Xev(n_events, p);
    Vector yev(n_events);
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (delta[static_cast<std::size_t>(i)] == 1) {
            Xev.row(k) = X.row(i);
            yev(k) = log_s(i);
            ++k;
        }
    }
    Vector beta = Xev.colPivHouseholderQr().solve(yev);
    const double ev_var = (yev.array() - yev.mean()).square().sum() / static_cast<double>(n_events);
    double tau = 0.5 * std::log(std::max(ev_var, 1e-6));

    auto cur = detail::lognormal_derivs(X, log_s, delta, beta, tau);
    LognormalAftFit fit;
    const int max_iter = 100;
    int iter = 0;
    for (; iter < max_iter; ++iter) {
        if (cur.grad.lpNorm<Eigen::Infinity>() < 1e-6) {
            fit.converged = true;
            break;
        }
        // ascent direction from the (negated) Hessian, ridged if necessary
        Matrix A = -cur.hess;
        Vector step;
        double ridge = 0.0;
        while (true) {
            Eigen::LDLT<Matrix> ldlt(A + ridge * Matrix::Identity(p + 1, p + 1));
            step = ldlt.solve(cur.grad);
            if (ldlt.info() == Eigen::Success && step.allFinite() && cur.grad.dot(step) > 0.0) break;
            ridge = (ridge == 0.0) ? 1e-8 : ridge * 10.0;
            if (ridge > 1e8) throw std::runtime_error("fit_lognormal_aft: cannot find an ascent direction");
        }
        // Newton decrement: the quadratic model's remaining log-likelihood
        // gain.  An absolute gradient threshold alone does not scale with n
        // (the Hessian grows with the row count while the attainable
        // log-likelihood resolution does not), so a sub-resolution decrement
        // is the convergence certificate.
        if (0.5 * cur.grad.dot(step) < 1e-9) {
            fit.converged = true;
            break;
        }
        // step-halving keeps the log-likelihood monotone
        double scale_step = 1.0;
        bool improved = false;
        for (int half = 0; half < 40; ++half) {
            Vector beta_try = beta + scale_step * step.head(p);
            const double tau_try = tau + scale_step * step(p);
            auto trial = detail::lognormal_derivs(X, log_s, delta, beta_try, tau_try);
            if (std::isfinite(trial.ll) && trial.ll >= cur.ll) {
                beta = beta_try;
                tau = tau_try;
                cur = std::move(trial);
                improved = true;
                break;
            }
            scale_step *= 0.5;
        }
        if (!improved) break;  // stuck; convergence flag decides below
    }
    if (!fit.converged && cur.grad.lpNorm<Eigen::Infinity>() < 1e-6) fit.converged = true;

    fit.beta = beta;
    fit.log_scale = tau;
    fit.n_iter = iter;
    fit.loglik = cur.ll;
    Matrix A = -cur.hess;
    Eigen::LDLT<Matrix> ldlt(A);
    fit.hessian_inverse = ldlt.solve(Matrix::Identity(p + 1, p + 1));
    return fit;
}

// ------------------------------------------------------------------------
// Two-stage Q-learning backward induction
// ------------------------------------------------------------------------

namespace detail {

inline Frame stage2_frame(const std::vector<TwoStageRow>& rows, bool entrants_only) {
    Frame f;
    for (const auto& r : rows) {
        if (entrants_only && !r.is_entrant()) continue;
        f["x1"].push_back(r.x1);
        f["b1"].push_back(r.b1);
        f["z1"].push_back(r.z1);
        f["a1"].push_back(static_cast<double>(r.a1));
        f["time1"].push_back(r.time1);
        f["x2"].push_back(r.x2);
        f["b2"].push_back(r.b2);
        f["z2"].push_back(r.z2);
        f["a2"].push_back(static_cast<double>(r.a2));
    }
    return f;
}

inline Frame stage1_frame(const std::vector<TwoStageRow>& rows) {
    Frame f;
    for (const auto& r : rows) {
        f["x1"].push_back(r.x1);
        f["b1"].push_back(r.b1);
        f["z1"].push_back(r.z1);
        f["a1"].push_back(static_cast<double>(r.a1));
    }
    return f;
}

// Per-row argmax (ties -> lowest action code) over per-action predictions.
inline void argmax_actions(const std::map<int, Vector>& by_action, std::vector<int>& best,
                           std::vector<double>& best_value) {
    const auto n = static_cast<std::size_t>(by_action.begin()->second.size());
    best.assign(n, by_action.begin()->first);
    best_value.assign(n, -std::numeric_limits<double>::infinity());
    for (const auto& [action, pred] : by_action) {  // std::map iterates ascending
        for (std::size_t i = 0; i < n; ++i) {
            const double v = pred(static_cast<Eigen::Index>(i));
            if (v > best_value[i]) {
                best_value[i] = v;
                best[i] = action;
            }
        }
    }
}

} // namespace detail

struct QlearnResult {
    ModelFormula formula1, formula2;
    LognormalAftFit fit1, fit2;
    std::vector<int> action_set1, action_set2;  // distinct observed codes, ascending

    // training-cohort outputs (stage-2 entries are -1 / NaN for non-entrants)
    std::vector<int> a2_opt;
    std::vector<int> a1_opt;
    std::vector<double> mean_logt2_opt;      // linear predictor at the chosen Stage-2 action
    std::vector<double> mean_logtotal_opt;   // linear predictor at the chosen Stage-1 action
};

struct QlearnPrediction {
    std::vector<int> a2_opt, a1_opt;
    std::vector<double> mean_logt2_opt, mean_logtotal_opt;
    std::map<int, std::vector<double>> logt2_by_action, logtotal_by_action;
};

// Predict optimal actions and mean log times for rows with full covariates
// (every row must carry Stage-2 covariates, as in a simulated test set).
inline QlearnPrediction qlearn_predict(const QlearnResult& model, const std::vector<TwoStageRow>& rows) {
    QlearnPrediction out;
    if (rows.empty()) return out;
    Frame f2 = detail::stage2_frame(rows, false);
    std::map<int, Vector> pred2;
    for (int a : model.action_set2) {
        f2["a2"].assign(rows.size(), static_cast<double>(a));
        pred2[a] = build_design(model.formula2, f2) * model.fit2.beta;
    }
    detail::argmax_actions(pred2, out.a2_opt, out.mean_logt2_opt);

    Frame f1 = detail::stage1_frame(rows);
    std::map<int, Vector> pred1;
    for (int a : model.action_set1) {
        f1["a1"].assign(rows.size(), static_cast<double>(a));
        pred1[a] = build_design(model.formula1, f1) * model.fit1.beta;
    }
    detail::argmax_actions(pred1, out.a1_opt, out.mean_logtotal_opt);

    for (const auto& [a, v] : pred2) {
        out.logt2_by_action[a] = std::vector<double>(v.data(), v.data() + v.size());
    }
    for (const auto& [a, v] : pred1) {
        out.logtotal_by_action[a] = std::vector<double>(v.data(), v.data() + v.size());
    }
    return out;
}

inline QlearnResult qlearn_two_stage(const std::vector<TwoStageRow>& rows,
                                     const ModelFormula& formula1, const ModelFormula& formula2) {
    QlearnResult res;
    res.formula1 = formula1;
    res.formula2 = formula2;

    std::vector<const TwoStageRow*> entrants;
    for (const auto& r : rows) {
        if (r.is_entrant()) entrants.push_back(&r);
    }
    if (entrants.empty()) throw std::runtime_error("qlearn_two_stage: no Stage-2 entrants");

    {
        std::set<int> s1, s2;
        for (const auto& r : rows) s1.insert(r.a1);
        for (const auto* r : entrants) s2.insert(r->a2);
        res.action_set1.assign(s1.begin(), s1.end());
        res.action_set2.assign(s2.begin(), s2.end());
    }

    // Stage 2: censored log-normal fit over entrants
    Frame f2 = detail::stage2_frame(rows, true);
    Matrix X2 = build_design(formula2, f2);
    Vector s2(static_cast<Eigen::Index>(entrants.size()));
    std::vector<int> d2(entrants.size());
    for (std::size_t i = 0; i < entrants.size(); ++i) {
        s2(static_cast<Eigen::Index>(i)) = entrants[i]->time2;
        d2[i] = entrants[i]->delta2;
    }
    res.fit2 = fit_lognormal_aft(X2, s2, d2);

    // per-entrant optimal Stage-2 action and predicted mean log t2
    std::map<int, Vector> pred2;
    for (int a : res.action_set2) {
        f2["a2"].assign(entrants.size(), static_cast<double>(a));
        pred2[a] = build_design(formula2, f2) * res.fit2.beta;
    }
    std::vector<int> ent_a2opt;
    std::vector<double> ent_best;
    detail::argmax_actions(pred2, ent_a2opt, ent_best);

    // plug-in Stage-1 response
    const auto n = rows.size();
    Vector s_hat(static_cast<Eigen::Index>(n));
    std::vector<int> d_hat(n);
    res.a2_opt.assign(n, -1);
    res.mean_logt2_opt.assign(n, std::numeric_limits<double>::quiet_NaN());
    std::size_t e = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& r = rows[i];
        if (!r.is_entrant()) {
            s_hat(static_cast<Eigen::Index>(i)) = r.time1;
            d_hat[i] = r.delta1;
            continue;
        }
        res.a2_opt[i] = ent_a2opt[e];
        res.mean_logt2_opt[i] = ent_best[e];
        if (r.a2 == ent_a2opt[e] && r.delta2 == 1) {
            s_hat(static_cast<Eigen::Index>(i)) = r.time1 + r.time2;  // observed at the optimum
        } else {
            s_hat(static_cast<Eigen::Index>(i)) = r.time1 + std::exp(ent_best[e]);  // median plug-in
        }
        d_hat[i] = 1;
        ++e;
    }

    // Stage 1: censored fit over the augmented cohort (censoring only via
    // non-entrants)
    Frame f1 = detail::stage1_frame(rows);
    Matrix X1 = build_design(formula1, f1);
    res.fit1 = fit_lognormal_aft(X1, s_hat, d_hat);

    std::map<int, Vector> pred1;
    for (int a : res.action_set1) {
        f1["a1"].assign(n, static_cast<double>(a));
        pred1[a] = build_design(formula1, f1) * res.fit1.beta;
    }
    detail::argmax_actions(pred1, res.a1_opt, res.mean_logtotal_opt);
    return res;
}

// ------------------------------------------------------------------------
// Subject-level bootstrap
// ------------------------------------------------------------------------

struct CoefficientTable {
    std::vector<std::string> names;  // design columns then "log(scale)"
    Vector point;
    Vector boot_mean, boot_sd, lo95, hi95;
};

struct BootstrapQlearn {
    CoefficientTable stage1, stage2;
    Matrix logtotal_opt_draws;  // B x n, optimal Stage-1 mean log time per resample
    Matrix logt2_opt_draws;     // B x n, NaN where the row lacks Stage-2 covariates
    int failed_resamples = 0;
};

inline BootstrapQlearn bootstrap_qlearn(const std::vector<TwoStageRow>& rows,
                                        const ModelFormula& formula1, const ModelFormula& formula2,
                                        int B, RngStream& rng) {
    if (B < 2) throw std::invalid_argument("bootstrap_qlearn: B must be >= 2");
    const auto point = qlearn_two_stage(rows, formula1, formula2);
    const auto n = rows.size();

    const bool full_covariates = std::all_of(rows.begin(), rows.end(),
                                             [](const TwoStageRow& r) { return std::isfinite(r.x2); });

    const auto p1 = static_cast<Eigen::Index>(point.fit1.beta.size());
    const auto p2 = static_cast<Eigen::Index>(point.fit2.beta.size());
    Matrix coef1(B, p1 + 1), coef2(B, p2 + 1);
    BootstrapQlearn out;
    out.logtotal_opt_draws = Matrix::Constant(B, static_cast<Eigen::Index>(n),
                                              std::numeric_limits<double>::quiet_NaN());
    out.logt2_opt_draws = Matrix::Constant(B, static_cast<Eigen::Index>(n),
                                           std::numeric_limits<double>::quiet_NaN());

    int attempts = 0;
    for (int b = 0; b < B; ++b) {
        while (true) {
            if (++attempts > 10 * B) {
                throw std::runtime_error("bootstrap_qlearn: resample failures exhausted the retry budget");
            }
            std::vector<TwoStageRow> resample;
            resample.reserve(n);
            for (std::size_t i = 0; i < n; ++i) {
                resample.push_back(rows[static_cast<std::size_t>(rng.uniform_index(n))]);
            }
            try {
                const auto fit = qlearn_two_stage(resample, formula1, formula2);
                coef1.row(b).head(p1) = fit.fit1.beta.transpose();
                coef1(b, p1) = fit.fit1.log_scale;
                coef2.row(b).head(p2) = fit.fit2.beta.transpose();
                coef2(b, p2) = fit.fit2.log_scale;
                if (full_covariates) {
                    const auto pred = qlearn_predict(fit, rows);
                    for (std::size_t i = 0; i < n; ++i) {
                        out.logtotal_opt_draws(b, static_cast<Eigen::Index>(i)) = pred.mean_logtotal_opt[i];
                        out.logt2_opt_draws(b, static_cast<Eigen::Index>(i)) = pred.mean_logt2_opt[i];
                    }
                } else {
                    const auto pred = qlearn_predict(fit, rows);  // stage-1 columns always exist
                    for (std::size_t i = 0; i < n; ++i) {
                        out.logtotal_opt_draws(b, static_cast<Eigen::Index>(i)) = pred.mean_logtotal_opt[i];
                    }
                }
                break;
            } catch (const std::exception&) {
                ++out.failed_resamples;
            }
        }
    }

    auto summarize = [](const std::vector<std::string>& names, const Vector& pt, const Matrix& draws) {
        CoefficientTable t;
        t.names = names;
        t.point = pt;
        const Eigen::Index k = draws.cols();
        t.boot_mean.resize(k);
        t.boot_sd.resize(k);
        t.lo95.resize(k);
        t.hi95.resize(k);
        for (Eigen::Index j = 0; j < k; ++j) {
            std::vector<double> col(draws.col(j).data(), draws.col(j).data() + draws.rows());
            t.boot_mean(j) = mean_of(col);
            t.boot_sd(j) = std::sqrt(sample_variance(col));
            t.lo95(j) = quantile_type7(col, 0.025);
            t.hi95(j) = quantile_type7(col, 0.975);
        }
        return t;
    };

    auto names_with_scale = [](const ModelFormula& f) {
        auto names = design_column_names(f);
        names.push_back("log(scale)");
        return names;
    };
    Vector pt1(p1 + 1), pt2(p2 + 1);
    pt1.head(p1) = point.fit1.beta;
    pt1(p1) = point.fit1.log_scale;
    pt2.head(p2) = point.fit2.beta;
    pt2(p2) = point.fit2.log_scale;
    out.stage1 = summarize(names_with_scale(formula1), pt1, coef1);
    out.stage2 = summarize(names_with_scale(formula2), pt2, coef2);
    return out;
}

} // namespace survdtr
