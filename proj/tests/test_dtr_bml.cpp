#include <catch2/catch_amalgamated.hpp>

#include <survdtr/dtr_bml.hpp>
#include <survdtr/parallel.hpp>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <vector>

using namespace survdtr;
using Catch::Matchers::ContainsSubstring;

namespace {

// Synthetic two-stage cohort with events and censorings at both stages.
// Entrants' entry times are observed; non-entrants may be censored.
std::vector<TwoStageRow> make_cohort(int n, std::uint64_t seed) {
    RngStream rng(seed, 800);
    std::vector<TwoStageRow> rows;
    rows.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        TwoStageRow r;
        r.id = i;
        r.x1 = rng.uniform(0.1, 2.0);
        r.b1 = rng.bernoulli(0.5) ? 1.0 : 0.0;
        r.z1 = rng.normal();
        r.a1 = rng.bernoulli(0.5) ? 1 : 0;
        const double signal1 = r.a1 == 1 ? (r.x1 > 1.0 ? 0.5 : -0.5) : 0.0;
        const double t1 = std::exp(rng.normal(0.4 + 0.6 * r.x1 + 0.2 * r.b1 + signal1, 0.3));
        r.eta = rng.bernoulli(0.55) ? 1 : 0;
        if (r.eta == 1) {
            r.time1 = t1;
            r.delta1 = 1;
            r.x2 = rng.uniform(0.1, 2.0);
            r.b2 = rng.bernoulli(0.5) ? 1.0 : 0.0;
            r.z2 = rng.normal();
            r.a2 = rng.bernoulli(0.5) ? 1 : 0;
            const double signal2 = r.a2 == 1 ? (r.x2 > 1.0 ? 0.6 : -0.6) : 0.0;
            const double t2 = std::exp(rng.normal(0.3 + 0.4 * r.x2 + signal2, 0.3));
            const double c2 = rng.uniform(0.5, 8.0);
            r.time2 = std::min(t2, c2);
            r.delta2 = t2 < c2 ? 1 : 0;
        } else {
            const double c1 = rng.uniform(0.5, 20.0);
            r.time1 = std::min(t1, c1);
            r.delta1 = t1 < c1 ? 1 : 0;
        }
        rows.push_back(r);
    }
    return rows;
}

BartHyper small_hyper(int m) {
    BartHyper hyper;
    hyper.m = m;
    return hyper;
}

bool int_matrices_equal(const IntMatrix& a, const IntMatrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    return (a.array() == b.array()).all();
}

bool matrices_identical(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    return a.isApprox(b, 0.0);
}

bool maps_identical(const std::map<int, Matrix>& a, const std::map<int, Matrix>& b) {
    if (a.size() != b.size()) return false;
    for (const auto& [key, mat] : a) {
        auto it = b.find(key);
        if (it == b.end() || !matrices_identical(mat, it->second)) return false;
    }
    return true;
}

} // namespace

TEST_CASE("dtr config validation") {
    DtrConfig config;
    REQUIRE_NOTHROW(config.validate());

    DtrConfig bad = config;
    bad.keep = 0;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = config;
    bad.threads = 0;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = config;
    bad.burn = -1;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = config;
    bad.burn1 = -1;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = config;
    bad.hyper.m = 0;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("parallel_for runs every task once regardless of thread count") {
    const std::size_t n = 137;
    std::vector<std::vector<double>> results;
    for (int threads : {1, 3, 8}) {
        std::vector<double> out(n, 0.0);
        std::atomic<int> calls{0};
        parallel_for(n, threads, [&](std::size_t k) {
            out[k] = static_cast<double>(k) * static_cast<double>(k) + 0.5;
            calls.fetch_add(1);
        });
        REQUIRE(calls.load() == static_cast<int>(n));
        results.push_back(std::move(out));
    }
    REQUIRE(results[0] == results[1]);
    REQUIRE(results[0] == results[2]);

    // zero tasks is a no-op
    REQUIRE_NOTHROW(parallel_for(0, 4, [&](std::size_t) { throw std::logic_error("never"); }));
}

TEST_CASE("parallel_for reports failures and validates thread count") {
    REQUIRE_THROWS_AS(parallel_for(3, 0, [](std::size_t) {}), std::invalid_argument);

    // sequential path visits tasks in index order, so the first throwing task wins
    REQUIRE_THROWS_WITH(parallel_for(8, 1,
                                     [](std::size_t k) {
                                         if (k == 2 || k == 5) throw std::logic_error("boom");
                                     }),
                        ContainsSubstring("task 2 failed") && ContainsSubstring("boom"));

    // concurrent path still surfaces some failing task
    REQUIRE_THROWS_WITH(parallel_for(16, 8,
                                     [](std::size_t k) {
                                         if (k % 3 == 1) throw std::logic_error("bad slot");
                                     }),
                        ContainsSubstring("failed") && ContainsSubstring("bad slot"));
}

TEST_CASE("argmax_by_action breaks ties toward the lowest action code") {
    std::map<int, Matrix> by_action;
    by_action[0] = Matrix(2, 2);
    by_action[0] << 1.0, 4.0, 2.0, 7.0;
    by_action[1] = Matrix(2, 2);
    by_action[1] << 1.0, 5.0, 3.0, 7.0;
    by_action[3] = Matrix(2, 2);
    by_action[3] << 0.5, 5.0, 3.0, 8.0;

    const IntMatrix best = argmax_by_action(by_action);
    REQUIRE(best(0, 0) == 0);  // exact tie between 0 and 1 -> 0
    REQUIRE(best(0, 1) == 1);  // tie between 1 and 3 -> 1
    REQUIRE(best(1, 0) == 1);  // tie between 1 and 3 -> 1
    REQUIRE(best(1, 1) == 3);  // strict winner

    const Matrix value = chosen_values(by_action, best);
    REQUIRE(value(0, 0) == 1.0);
    REQUIRE(value(0, 1) == 5.0);
    REQUIRE(value(1, 0) == 3.0);
    REQUIRE(value(1, 1) == 8.0);

    REQUIRE_THROWS_AS(argmax_by_action({}), std::invalid_argument);
}

TEST_CASE("build_stage1_dataset hand-checked rows for both impute modes") {
    std::vector<TwoStageRow> records(3);
    records[0].x1 = 0.5;
    records[0].b1 = 1.0;
    records[0].z1 = -0.3;
    records[0].a1 = 0;
    records[0].time1 = 30.0;
    records[0].delta1 = 0;
    records[0].eta = 0;

    records[1].x1 = 1.2;
    records[1].b1 = 0.0;
    records[1].z1 = 0.7;
    records[1].a1 = 1;
    records[1].time1 = 10.0;
    records[1].delta1 = 1;
    records[1].eta = 1;
    records[1].a2 = 1;
    records[1].time2 = 7.0;
    records[1].delta2 = 1;

    records[2].x1 = 0.9;
    records[2].b1 = 1.0;
    records[2].z1 = 0.1;
    records[2].a1 = 0;
    records[2].time1 = 10.0;
    records[2].delta1 = 1;
    records[2].eta = 1;
    records[2].a2 = 0;
    records[2].time2 = 4.0;
    records[2].delta2 = 0;

    Stage2Samples stage2;
    stage2.entrant_rows = {1, 2};
    stage2.action_set = {0, 1};
    stage2.a2_opt.resize(2, 2);
    stage2.a2_opt << 1, 1,   // entrant 1 optimal matches its observed action in both draws
        0, 1;                // entrant 2: draw 0 matches (censored there), draw 1 does not
    stage2.t2_opt.resize(2, 2);
    stage2.t2_opt << 5.0, 5.5, 6.0, 2.5;

    const auto event0 = build_stage1_dataset(records, stage2, 0, ImputeMode::event);
    REQUIRE(event0.size() == 3);
    REQUIRE(event0[0].x == std::vector<double>{0.5, 1.0, -0.3, 0.0});
    REQUIRE(event0[0].s == 30.0);
    REQUIRE(event0[0].delta == 0);
    REQUIRE(event0[1].x == std::vector<double>{1.2, 0.0, 0.7, 1.0});
    REQUIRE(event0[1].s == 15.0);
    REQUIRE(event0[1].delta == 1);
    REQUIRE(event0[2].x == std::vector<double>{0.9, 1.0, 0.1, 0.0});
    REQUIRE(event0[2].s == 16.0);
    REQUIRE(event0[2].delta == 1);

    const auto event1 = build_stage1_dataset(records, stage2, 1, ImputeMode::event);
    REQUIRE(event1[1].s == 15.5);
    REQUIRE(event1[1].delta == 1);
    REQUIRE(event1[2].s == 12.5);
    REQUIRE(event1[2].delta == 1);

    // censored mode only rewrites entrants censored at their optimal action
    const auto cens0 = build_stage1_dataset(records, stage2, 0, ImputeMode::censored);
    REQUIRE(cens0[0].s == 30.0);
    REQUIRE(cens0[0].delta == 0);
    REQUIRE(cens0[1].s == 15.0);  // event at optimum: unchanged
    REQUIRE(cens0[1].delta == 1);
    REQUIRE(cens0[2].s == 14.0);  // censored at optimum: t1 + s2, still censored
    REQUIRE(cens0[2].delta == 0);

    const auto cens1 = build_stage1_dataset(records, stage2, 1, ImputeMode::censored);
    REQUIRE(cens1[2].s == 12.5);  // optimum differs from observed action: imputed event
    REQUIRE(cens1[2].delta == 1);
}

TEST_CASE("degenerate cohorts and bad prediction rows are rejected") {
    // no Stage-2 entrants
    std::vector<TwoStageRow> no_entrants(4);
    for (int i = 0; i < 4; ++i) {
        no_entrants[static_cast<std::size_t>(i)].x1 = 0.2 * (i + 1);
        no_entrants[static_cast<std::size_t>(i)].time1 = 1.0 + i;
        no_entrants[static_cast<std::size_t>(i)].delta1 = 1;
        no_entrants[static_cast<std::size_t>(i)].eta = 0;
    }
    RngStream rng(1, 801);
    REQUIRE_THROWS_WITH(fit_stage2(no_entrants, small_hyper(5), 2, 2, rng), ContainsSubstring("entrants"));
    DtrConfig config;
    config.hyper = small_hyper(5);
    config.burn = 2;
    config.keep = 2;
    config.burn1 = 2;
    REQUIRE_THROWS_AS(optimize_dtr(no_entrants, {}, config), std::runtime_error);

    // entrants exist but every Stage-2 observation is censored
    auto all_censored = make_cohort(30, 7);
    bool any_entrant = false;
    for (auto& r : all_censored) {
        if (r.is_entrant()) {
            r.delta2 = 0;
            any_entrant = true;
        }
    }
    REQUIRE(any_entrant);
    RngStream rng2(1, 802);
    REQUIRE_THROWS_WITH(fit_stage2(all_censored, small_hyper(5), 2, 2, rng2), ContainsSubstring("zero events"));

    // prediction rows must carry positive time1 and the full covariate block
    auto cohort = make_cohort(40, 11);
    std::vector<TwoStageRow> newdata(1);
    newdata[0] = cohort[0];
    for (auto& r : cohort) {
        if (r.is_entrant()) {
            newdata[0] = r;
            break;
        }
    }
    REQUIRE(newdata[0].is_entrant());
    auto bad = newdata;
    bad[0].x2 = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_AS(optimize_dtr(cohort, bad, config), std::invalid_argument);
    bad = newdata;
    bad[0].time1 = 0.0;
    REQUIRE_THROWS_AS(optimize_dtr(cohort, bad, config), std::invalid_argument);
}

TEST_CASE("stage-2 imputation keeps observed optima and respects censoring bounds") {
    const auto records = make_cohort(80, 21);
    DtrConfig config;
    config.hyper = small_hyper(20);
    config.burn = 120;
    config.keep = 5;
    config.burn1 = 60;
    config.seed = 42;
    config.threads = 4;

    const DtrPosterior post = optimize_dtr(records, {}, config);

    const auto n = static_cast<Eigen::Index>(records.size());
    const auto n_entrants = static_cast<Eigen::Index>(post.entrant_rows.size());
    REQUIRE(n_entrants > 10);

    // shape / count identity: one Stage-1 chain per kept Stage-2 draw
    REQUIRE(post.a2_opt.rows() == n_entrants);
    REQUIRE(post.a2_opt.cols() == 5);
    REQUIRE(post.t2_opt.rows() == n_entrants);
    REQUIRE(post.t2_opt.cols() == 5);
    REQUIRE(post.sigma2_draws.size() == 5);
    REQUIRE(post.a1_opt.rows() == n);
    REQUIRE(post.a1_opt.cols() == 5);
    REQUIRE(post.sigma1_draws.size() == 5);
    REQUIRE(post.action_set1 == std::vector<int>{0, 1});
    REQUIRE(post.action_set2 == std::vector<int>{0, 1});
    REQUIRE(post.yhat2_by_action.size() == 2);
    REQUIRE(post.yhat1_by_action.size() == 2);
    for (const auto& [a, mat] : post.yhat1_by_action) {
        REQUIRE(mat.rows() == n);
        REQUIRE(mat.cols() == 5);
    }
    REQUIRE(post.a2_opt_new.size() == 0);
    REQUIRE(post.yhat2_by_action_new.empty());

    for (Eigen::Index d = 0; d < 5; ++d) {
        REQUIRE(post.sigma1_draws(d) > 0.0);
        REQUIRE(post.sigma2_draws(d) > 0.0);
    }

    // entrant bookkeeping matches the cohort
    std::vector<std::size_t> expected_entrants;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (records[i].is_entrant()) expected_entrants.push_back(i);
    }
    REQUIRE(post.entrant_rows == expected_entrants);

    int case_event = 0, case_censored = 0, case_counterfactual = 0;
    for (Eigen::Index e = 0; e < n_entrants; ++e) {
        const auto& r = records[post.entrant_rows[static_cast<std::size_t>(e)]];
        for (Eigen::Index d = 0; d < 5; ++d) {
            const int best = post.a2_opt(e, d);

            // chosen action attains the per-cell maximum of the action values
            double max_val = post.yhat2_by_action.at(post.action_set2.front())(e, d);
            for (int a : post.action_set2) max_val = std::max(max_val, post.yhat2_by_action.at(a)(e, d));
            REQUIRE(post.yhat2_by_action.at(best)(e, d) == max_val);

            REQUIRE(post.t2_opt(e, d) > 0.0);
            if (r.a2 == best && r.delta2 == 1) {
                REQUIRE(post.t2_opt(e, d) == r.time2);  // case (i): exact passthrough
                ++case_event;
            } else if (r.a2 == best) {
                REQUIRE(post.t2_opt(e, d) >= r.time2);  // case (ii): truncated below at s2
                ++case_censored;
            } else {
                ++case_counterfactual;
            }
        }
    }
    REQUIRE(case_event > 0);
    REQUIRE(case_censored > 0);
    REQUIRE(case_counterfactual > 0);

    // stage-1 argmax consistency
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index d = 0; d < 5; ++d) {
            const int best = post.a1_opt(i, d);
            double max_val = post.yhat1_by_action.at(post.action_set1.front())(i, d);
            for (int a : post.action_set1) max_val = std::max(max_val, post.yhat1_by_action.at(a)(i, d));
            REQUIRE(post.yhat1_by_action.at(best)(i, d) == max_val);
        }
    }
}

TEST_CASE("stage-1 ensemble chains are addressed by seed and chain index") {
    const auto records = make_cohort(50, 33);
    const BartHyper hyper = small_hyper(10);
    const std::uint64_t seed = 99;

    RngStream rng_fit(seed, kStage2FitStream);
    const AftBartFit fit2 = fit_stage2(records, hyper, 40, 4, rng_fit);
    RngStream rng_sample(seed, kStage2SampleStream);
    const Stage2Samples stage2 = sample_stage2_optimal(fit2, records, rng_sample);

    std::vector<std::vector<SurvivalRecord>> datasets;
    for (Eigen::Index d = 0; d < 4; ++d) {
        datasets.push_back(build_stage1_dataset(records, stage2, d, ImputeMode::event));
    }
    const auto fits = fit_stage1_ensemble(datasets, hyper, 50, seed, 3);
    REQUIRE(fits.size() == 4);

    Matrix X(static_cast<Eigen::Index>(records.size()), 4);
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto cov = stage1_covariates(records[i], records[i].a1);
        for (std::size_t c = 0; c < cov.size(); ++c) {
            X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = cov[c];
        }
    }

    // chain k must be reproducible in isolation from RngStream(seed, k)
    for (std::size_t k = 0; k < fits.size(); ++k) {
        RngStream chain_rng(seed, static_cast<std::uint64_t>(k));
        const AftBartFit manual = fit_aft_bart(datasets[k], hyper, 50, 1, chain_rng, stage1_schema());
        REQUIRE(fits[k].draws.size() == 1);
        REQUIRE(manual.draws.size() == 1);
        REQUIRE(fits[k].offset_mu == manual.offset_mu);
        REQUIRE(fits[k].draws[0].sigma == manual.draws[0].sigma);
        const Vector pred_ensemble = predict(fits[k].draws[0].forest, fits[k].offset_mu, X);
        const Vector pred_manual = predict(manual.draws[0].forest, manual.offset_mu, X);
        REQUIRE(pred_ensemble.isApprox(pred_manual, 0.0));
    }
}

TEST_CASE("posterior is bitwise identical across thread counts") {
    const auto records = make_cohort(60, 55);
    std::vector<TwoStageRow> newdata;
    for (const auto& r : records) {
        if (r.is_entrant()) {
            newdata.push_back(r);
            if (newdata.size() == 3) break;
        }
    }
    REQUIRE(newdata.size() == 3);

    DtrConfig config;
    config.hyper = small_hyper(10);
    config.burn = 80;
    config.keep = 6;
    config.burn1 = 40;
    config.seed = 7;

    config.threads = 1;
    const DtrPosterior serial = optimize_dtr(records, newdata, config);
    config.threads = 8;
    const DtrPosterior threaded = optimize_dtr(records, newdata, config);

    REQUIRE(serial.entrant_rows == threaded.entrant_rows);
    REQUIRE(serial.action_set1 == threaded.action_set1);
    REQUIRE(serial.action_set2 == threaded.action_set2);
    REQUIRE(int_matrices_equal(serial.a2_opt, threaded.a2_opt));
    REQUIRE(int_matrices_equal(serial.a1_opt, threaded.a1_opt));
    REQUIRE(matrices_identical(serial.t2_opt, threaded.t2_opt));
    REQUIRE(serial.sigma2_draws.isApprox(threaded.sigma2_draws, 0.0));
    REQUIRE(serial.sigma1_draws.isApprox(threaded.sigma1_draws, 0.0));
    REQUIRE(maps_identical(serial.yhat2_by_action, threaded.yhat2_by_action));
    REQUIRE(maps_identical(serial.yhat1_by_action, threaded.yhat1_by_action));
    REQUIRE(int_matrices_equal(serial.a2_opt_new, threaded.a2_opt_new));
    REQUIRE(int_matrices_equal(serial.a1_opt_new, threaded.a1_opt_new));
    REQUIRE(maps_identical(serial.yhat2_by_action_new, threaded.yhat2_by_action_new));
    REQUIRE(maps_identical(serial.yhat1_by_action_new, threaded.yhat1_by_action_new));

    // prediction rows copied from training entrants reproduce their fitted values
    REQUIRE(serial.a2_opt_new.rows() == 3);
    REQUIRE(serial.a2_opt_new.cols() == 6);
    REQUIRE(serial.a1_opt_new.rows() == 3);
    for (int j = 0; j < 3; ++j) {
        const auto train_row = static_cast<Eigen::Index>(serial.entrant_rows[static_cast<std::size_t>(j)]);
        for (int a : serial.action_set2) {
            REQUIRE(serial.yhat2_by_action_new.at(a).row(j).isApprox(serial.yhat2_by_action.at(a).row(j), 0.0));
        }
        for (int a : serial.action_set1) {
            REQUIRE(serial.yhat1_by_action_new.at(a).row(j).isApprox(serial.yhat1_by_action.at(a).row(train_row), 0.0));
        }
    }
}

TEST_CASE("dominant stage-1 treatment effect is recovered across the posterior") {
    RngStream gen(99, 803);
    std::vector<TwoStageRow> records;
    for (int i = 0; i < 120; ++i) {
        TwoStageRow r;
        r.id = i;
        r.x1 = gen.uniform(0.1, 2.0);
        r.b1 = gen.bernoulli(0.5) ? 1.0 : 0.0;
        r.z1 = gen.normal();
        r.a1 = gen.bernoulli(0.5) ? 1 : 0;
        // action 1 multiplies survival by roughly e^{2.5} at stage 1
        const double t1 = std::exp(gen.normal(0.3 + 2.5 * r.a1, 0.1));
        r.eta = i % 6 == 0 ? 1 : 0;  // a few entrants so Stage 2 is fittable
        if (r.eta == 1) {
            r.time1 = t1;
            r.delta1 = 1;
            r.x2 = gen.uniform(0.1, 2.0);
            r.b2 = gen.bernoulli(0.5) ? 1.0 : 0.0;
            r.z2 = gen.normal();
            r.a2 = gen.bernoulli(0.5) ? 1 : 0;
            r.time2 = std::exp(gen.normal(0.2, 0.1));
            r.delta2 = 1;
        } else {
            r.time1 = t1;
            r.delta1 = 1;
        }
        records.push_back(r);
    }

    DtrConfig config;
    config.hyper = small_hyper(20);
    config.burn = 100;
    config.keep = 8;
    config.burn1 = 60;
    config.seed = 3;
    config.threads = 4;
    const DtrPosterior post = optimize_dtr(records, {}, config);

    long picked_one = 0;
    for (Eigen::Index i = 0; i < post.a1_opt.rows(); ++i) {
        for (Eigen::Index d = 0; d < post.a1_opt.cols(); ++d) {
            if (post.a1_opt(i, d) == 1) ++picked_one;
        }
    }
    const double frac = static_cast<double>(picked_one) /
                        static_cast<double>(post.a1_opt.rows() * post.a1_opt.cols());
    REQUIRE(frac >= 0.99);
}

TEST_CASE("impute modes differ only on entrants censored at their optimum") {
    const auto records = make_cohort(70, 77);
    const BartHyper hyper = small_hyper(10);
    RngStream rng_fit(5, kStage2FitStream);
    const AftBartFit fit2 = fit_stage2(records, hyper, 30, 3, rng_fit);
    RngStream rng_sample(5, kStage2SampleStream);
    const Stage2Samples stage2 = sample_stage2_optimal(fit2, records, rng_sample);

    for (Eigen::Index d = 0; d < 3; ++d) {
        const auto ev = build_stage1_dataset(records, stage2, d, ImputeMode::event);
        const auto ce = build_stage1_dataset(records, stage2, d, ImputeMode::censored);
        REQUIRE(ev.size() == records.size());
        REQUIRE(ce.size() == records.size());
        Eigen::Index e = 0;
        for (std::size_t i = 0; i < records.size(); ++i) {
            const auto& r = records[i];
            REQUIRE(ev[i].x == ce[i].x);
            bool case_two = false;
            if (r.is_entrant()) {
                case_two = r.a2 == stage2.a2_opt(e, d) && r.delta2 == 0;
                ++e;
            }
            if (case_two) {
                REQUIRE(ce[i].s == r.time1 + r.time2);
                REQUIRE(ce[i].delta == 0);
                REQUIRE(ev[i].delta == 1);
            } else {
                REQUIRE(ev[i].s == ce[i].s);
                REQUIRE(ev[i].delta == ce[i].delta);
            }
        }
    }
}
