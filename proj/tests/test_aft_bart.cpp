#include <catch_amalgamated.hpp>
#include <survdtr/aft_bart.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

using namespace survdtr;

namespace {

// Shared generate-and-recover source: log t = f(x) + sigma * eps.
std::vector<SurvivalRecord> lognormal_records(int n, double sigma_true, double censor_upper, RngStream& rng) {
    std::vector<SurvivalRecord> recs;
    recs.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const double x0 = rng.uniform();
        const double x1 = rng.uniform();
        const double f = 0.5 + 0.4 * std::sin(3.0 * x0) + 0.3 * x1;
        const double t = std::exp(f + sigma_true * rng.normal());
        SurvivalRecord r;
        r.x = {x0, x1};
        if (censor_upper > 0.0) {
            const double c = rng.uniform(0.0, censor_upper);
            r.s = std::min(t, c);
            r.delta = (t <= c) ? 1 : 0;
        } else {
            r.s = t;
            r.delta = 1;
        }
        recs.push_back(std::move(r));
    }
    return recs;
}

} // namespace

TEST_CASE("aft fit input validation") {
    BartHyper hyper;
    hyper.m = 5;
    RngStream rng(61, 0);

    std::vector<SurvivalRecord> all_censored = {
        {{0.1}, 2.0, 0}, {{0.4}, 1.0, 0}, {{0.7}, 3.0, 0}, {{0.8}, 1.5, 0}, {{0.9}, 2.5, 0},
    };
    REQUIRE_THROWS_AS(fit_aft_bart(all_censored, hyper, 2, 2, rng), std::runtime_error);

    std::vector<SurvivalRecord> negative = {
        {{0.1}, 2.0, 1}, {{0.4}, -1.0, 1}, {{0.7}, 3.0, 1}, {{0.8}, 1.5, 1}, {{0.9}, 2.5, 1},
    };
    REQUIRE_THROWS_AS(fit_aft_bart(negative, hyper, 2, 2, rng), std::invalid_argument);

    std::vector<SurvivalRecord> ragged = {
        {{0.1, 0.2}, 2.0, 1}, {{0.4}, 1.0, 1}, {{0.7, 0.1}, 3.0, 1}, {{0.8, 0.3}, 1.5, 1}, {{0.9, 0.2}, 2.5, 1},
    };
    REQUIRE_THROWS_AS(fit_aft_bart(ragged, hyper, 2, 2, rng), std::invalid_argument);

    std::vector<SurvivalRecord> bad_delta = {
        {{0.1}, 2.0, 1}, {{0.4}, 1.0, 2}, {{0.7}, 3.0, 1}, {{0.8}, 1.5, 1}, {{0.9}, 2.5, 1},
    };
    REQUIRE_THROWS_AS(fit_aft_bart(bad_delta, hyper, 2, 2, rng), std::invalid_argument);

    std::vector<SurvivalRecord> fine = {
        {{0.1}, 2.0, 1}, {{0.4}, 1.0, 1}, {{0.7}, 3.0, 1}, {{0.8}, 1.5, 1}, {{0.9}, 2.5, 1},
    };
    REQUIRE_THROWS_AS(fit_aft_bart(fine, hyper, 2, 2, rng, {"a", "b"}), std::invalid_argument);
}

TEST_CASE("all-event data reproduces the plain regression sampler bitwise") {
    const int n = 60, burn = 5, keep = 7;
    RngStream data_rng(63, 0);
    std::vector<SurvivalRecord> recs;
    Vector log_s(n);
    Matrix X(n, 1);
    for (int i = 0; i < n; ++i) {
        const double x = data_rng.uniform();
        const double t = std::exp(1.0 + 0.8 * x + 0.25 * data_rng.normal());
        recs.push_back({{x}, t, 1});
        X(i, 0) = x;
        log_s(i) = std::log(t);
    }
    BartHyper hyper;
    hyper.m = 10;

    RngStream fit_rng(63, 1);
    auto fit = fit_aft_bart(recs, hyper, burn, keep, fit_rng);

    RngStream ref_rng(63, 1);
    auto st = init_state(log_s, X, hyper);
    auto cuts = build_cutpoints(X, hyper.numcut);
    Matrix probe(3, 1);
    probe << 0.123, 0.5, 0.987;
    int kept = 0;
    for (int sweep = 0; sweep < burn + keep; ++sweep) {
        gibbs_step(st, log_s, X, hyper, cuts, ref_rng);
        if (sweep >= burn) {
            REQUIRE(fit.draws[static_cast<std::size_t>(kept)].sigma == std::sqrt(st.sigma2));
            Vector ref = predict(st, probe);
            Vector got = predict(fit.draws[static_cast<std::size_t>(kept)].forest, fit.offset_mu, probe);
            for (Eigen::Index r = 0; r < 3; ++r) REQUIRE(got(r) == ref(r));
            ++kept;
        }
    }
    REQUIRE(kept == keep);
    REQUIRE(fit.offset_mu == log_s.mean());
}

TEST_CASE("imputation respects censoring and never touches event rows") {
    RngStream data_rng(65, 0);
    auto recs = lognormal_records(120, 0.4, 6.0, data_rng);
    REQUIRE(std::any_of(recs.begin(), recs.end(), [](const auto& r) { return r.delta == 0; }));

    BartHyper hyper;
    hyper.m = 10;
    RngStream fit_rng(65, 1);
    int observed_sweeps = 0;
    auto observer = [&](int, const Vector& y) {
        for (std::size_t i = 0; i < recs.size(); ++i) {
            const double ls = std::log(recs[i].s);
            if (recs[i].delta == 1) {
                REQUIRE(y(static_cast<Eigen::Index>(i)) == ls);
            } else {
                REQUIRE(y(static_cast<Eigen::Index>(i)) >= ls);
            }
        }
        ++observed_sweeps;
    };
    auto fit = fit_aft_bart(recs, hyper, 20, 20, fit_rng, {}, observer);
    REQUIRE(observed_sweeps == 40);
    REQUIRE(std::isfinite(fit.geweke_sigma_z));
}

TEST_CASE("seed determinism of the aft fit") {
    RngStream data_rng(67, 0);
    auto recs = lognormal_records(80, 0.3, 6.0, data_rng);
    BartHyper hyper;
    hyper.m = 8;
    RngStream r1(67, 9), r2(67, 9);
    auto f1 = fit_aft_bart(recs, hyper, 10, 10, r1);
    auto f2 = fit_aft_bart(recs, hyper, 10, 10, r2);
    REQUIRE(f1.draws.size() == f2.draws.size());
    Matrix probe(2, 2);
    probe << 0.2, 0.8, 0.9, 0.1;
    for (std::size_t d = 0; d < f1.draws.size(); ++d) {
        REQUIRE(f1.draws[d].sigma == f2.draws[d].sigma);
        Vector p1 = predict(f1.draws[d].forest, f1.offset_mu, probe);
        Vector p2 = predict(f2.draws[d].forest, f2.offset_mu, probe);
        REQUIRE(p1(0) == p2(0));
        REQUIRE(p1(1) == p2(1));
    }
}

TEST_CASE("generate and recover sigma under censoring") {
    const double sigma_true = 0.3;
    RngStream data_rng(69, 0);
    auto recs = lognormal_records(800, sigma_true, 8.0, data_rng);
    const double censored = static_cast<double>(std::count_if(
        recs.begin(), recs.end(), [](const auto& r) { return r.delta == 0; })) / static_cast<double>(recs.size());
    INFO("censoring fraction " << censored);
    REQUIRE(censored > 0.15);
    REQUIRE(censored < 0.45);

    BartHyper hyper;
    hyper.m = 50;
    RngStream fit_rng(69, 1);
    auto fit = fit_aft_bart(recs, hyper, 400, 200, fit_rng);
    double mean_sigma = 0.0;
    for (const auto& d : fit.draws) mean_sigma += d.sigma;
    mean_sigma /= static_cast<double>(fit.draws.size());
    INFO("posterior mean sigma " << mean_sigma);
    REQUIRE(mean_sigma >= 0.24);
    REQUIRE(mean_sigma <= 0.36);
}

TEST_CASE("posterior mean log time") {
    SECTION("uncensored constant response stays at the constant") {
        const double t0 = 20.0;
        std::vector<SurvivalRecord> recs;
        RngStream data_rng(71, 0);
        Matrix X(40, 1);
        for (int i = 0; i < 40; ++i) {
            const double x = data_rng.uniform();
            recs.push_back({{x}, t0, 1});
            X(i, 0) = x;
        }
        BartHyper hyper;
        hyper.m = 20;
        RngStream fit_rng(71, 1);
        auto fit = fit_aft_bart(recs, hyper, 60, 60, fit_rng);
        Matrix M = posterior_mean_logt(fit, X);
        REQUIRE(M.rows() == 60);
        REQUIRE(M.cols() == 40);
        REQUIRE(std::abs(M.mean() - std::log(t0)) <= 1e-3);
    }

    SECTION("per-draw values equal the forest sum; duplicate rows match") {
        RngStream data_rng(73, 0);
        auto recs = lognormal_records(60, 0.3, 0.0, data_rng);
        BartHyper hyper;
        hyper.m = 6;
        RngStream fit_rng(73, 1);
        auto fit = fit_aft_bart(recs, hyper, 5, 4, fit_rng);
        Matrix probe(2, 2);
        probe << 0.31, 0.62, 0.31, 0.62;  // duplicate rows
        Matrix M = posterior_mean_logt(fit, probe);
        std::vector<double> row = {0.31, 0.62};
        for (std::size_t d = 0; d < fit.draws.size(); ++d) {
            double manual = 0.0;
            for (const auto& tree : fit.draws[d].forest) manual += tree.evaluate(row);
            REQUIRE(M(static_cast<Eigen::Index>(d), 0) == fit.offset_mu + manual);
            REQUIRE(M(static_cast<Eigen::Index>(d), 0) == M(static_cast<Eigen::Index>(d), 1));
        }
        Matrix bad(1, 3);
        bad.setZero();
        REQUIRE_THROWS_AS(posterior_mean_logt(fit, bad), std::invalid_argument);
    }
}

TEST_CASE("posterior predictive times") {
    RngStream data_rng(75, 0);
    auto recs = lognormal_records(100, 0.3, 6.0, data_rng);
    BartHyper hyper;
    hyper.m = 10;
    RngStream fit_rng(75, 1);
    auto fit = fit_aft_bart(recs, hyper, 30, 10, fit_rng);
    const std::vector<double> x = {0.4, 0.7};

    SECTION("argument validation") {
        RngStream rng(75, 2);
        REQUIRE_THROWS_AS(posterior_predictive_time(fit, -1, x, std::nullopt, rng), std::invalid_argument);
        REQUIRE_THROWS_AS(posterior_predictive_time(fit, 10, x, std::nullopt, rng), std::invalid_argument);
        REQUIRE_THROWS_AS(posterior_predictive_time(fit, 0, {0.4}, std::nullopt, rng), std::invalid_argument);
        REQUIRE_THROWS_AS(posterior_predictive_time(fit, 0, x, 0.0, rng), std::invalid_argument);
        REQUIRE_THROWS_AS(posterior_predictive_time(fit, 0, x, -3.0, rng), std::invalid_argument);
    }

    SECTION("lower bound is always respected") {
        RngStream rng(75, 3);
        const double s = 4.5;
        for (int it = 0; it < 2000; ++it) {
            REQUIRE(posterior_predictive_time(fit, 2, x, s, rng) >= s);
        }
    }

    SECTION("degenerate noise returns the mean time") {
        auto tiny = fit;
        tiny.draws[0].sigma = 1e-12;
        double mean = tiny.offset_mu;
        for (const auto& tree : tiny.draws[0].forest) mean += tree.evaluate(x);
        RngStream rng(75, 4);
        const double t_free = posterior_predictive_time(tiny, 0, x, std::nullopt, rng);
        REQUIRE(t_free == Catch::Approx(std::exp(mean)).epsilon(0.01));
        const double lb = 0.5 * std::exp(mean);
        const double t_trunc = posterior_predictive_time(tiny, 0, x, lb, rng);
        REQUIRE(t_trunc == Catch::Approx(std::exp(mean)).epsilon(0.01));
    }

    SECTION("empirical median matches the log-normal identity") {
        const int draw = 5;
        double mean = fit.offset_mu;
        for (const auto& tree : fit.draws[static_cast<std::size_t>(draw)].forest) mean += tree.evaluate(x);
        const double sigma = fit.draws[static_cast<std::size_t>(draw)].sigma;
        const int N = 100000;
        std::vector<double> ts(static_cast<std::size_t>(N));
        RngStream rng(75, 5);
        for (auto& t : ts) t = posterior_predictive_time(fit, draw, x, std::nullopt, rng);
        std::nth_element(ts.begin(), ts.begin() + N / 2, ts.end());
        const double med = ts[static_cast<std::size_t>(N) / 2];
        const double target = std::exp(mean);
        // asymptotic sd of the sample median: 1 / (2 f(med) sqrt(N))
        const double se = target * sigma * std::sqrt(2.0 * M_PI) / (2.0 * std::sqrt(static_cast<double>(N)));
        INFO("median " << med << " target " << target << " se " << se);
        REQUIRE(std::abs(med - target) <= 3.0 * se);
    }
}
