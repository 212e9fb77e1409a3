#include "doctest.h"

#include "ecgclip/errors.hpp"
#include "ecgclip/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <set>

using namespace ecgclip;

namespace {

ScoredTask make_task(std::vector<double> scores, std::vector<int> labels, std::string id = "T") {
    ScoredTask t;
    t.task_id = std::move(id);
    t.scores = Eigen::Map<Eigen::VectorXd>(scores.data(), static_cast<Eigen::Index>(scores.size()));
    t.labels = std::move(labels);
    for (std::size_t i = 0; i < t.labels.size(); ++i) t.record_ids.push_back("r" + std::to_string(i));
    return t;
}

// Threshold sweep: every distinct score, counts recomputed from scratch.
double oracle_prauc(const ScoredTask& t) {
    double pos = 0;
    for (int l : t.labels) pos += l;
    std::set<double, std::greater<>> thresholds(t.scores.begin(), t.scores.end());
    double ap = 0.0, prev = 0.0;
    for (double th : thresholds) {
        long tp = 0, fp = 0;
        for (std::size_t i = 0; i < t.size(); ++i)
            if (t.scores[static_cast<Eigen::Index>(i)] >= th) (t.labels[i] ? tp : fp)++;
        const double recall = static_cast<double>(tp) / pos;
        const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
        ap += (recall - prev) * precision;
        prev = recall;
    }
    return ap;
}

// All positive-negative pairs.
double oracle_roauc(const ScoredTask& t) {
    double num = 0.0, pos = 0, neg = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
        (t.labels[i] ? pos : neg) += 1;
        if (!t.labels[i]) continue;
        for (std::size_t j = 0; j < t.size(); ++j) {
            if (t.labels[j]) continue;
            const double a = t.scores[static_cast<Eigen::Index>(i)], b = t.scores[static_cast<Eigen::Index>(j)];
            num += a > b ? 1.0 : (a == b ? 0.5 : 0.0);
        }
    }
    return num / (pos * neg);
}

ScoredTask random_task(Rng& rng, int n, bool ties) {
    std::uniform_real_distribution<double> u;
    std::uniform_int_distribution<int> level(0, 4);
    std::vector<double> s(static_cast<std::size_t>(n));
    std::vector<int> l(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        s[static_cast<std::size_t>(i)] = ties ? level(rng) / 4.0 : u(rng);
        l[static_cast<std::size_t>(i)] = u(rng) < 0.4 ? 1 : 0;
    }
    l[0] = 1;
    l[1] = 0;
    return make_task(s, l);
}

double mean_score(const ScoredTask& t) { return t.scores.mean(); }

}  // namespace

TEST_CASE("PRAUC examples") {
    CHECK(prauc(make_task({0.9, 0.8, 0.7, 0.6}, {1, 0, 1, 0})) == doctest::Approx(5.0 / 6.0).epsilon(1e-12));
    CHECK(prauc(make_task({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0})) == 1.0);
    CHECK(prauc(make_task({0.5, 0.5, 0.5, 0.5, 0.5}, {1, 0, 0, 1, 0})) == doctest::Approx(0.4).epsilon(1e-15));
    CHECK_THROWS_AS(prauc(make_task({0.1, 0.2}, {0, 0})), UndefinedMetric);
}

TEST_CASE("ROAUC examples") {
    CHECK(roauc(make_task({0.9, 0.8, 0.7, 0.6}, {1, 0, 1, 0})) == 0.75);
    CHECK(roauc(make_task({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0})) == 1.0);
    CHECK(roauc(make_task({0.3, 0.3, 0.3}, {1, 0, 1})) == 0.5);
    CHECK_THROWS_AS(roauc(make_task({0.1, 0.2}, {1, 1})), UndefinedMetric);
}

TEST_CASE("PRAUC and ROAUC equal brute-force oracles") {
    Rng rng = make_rng(31, 0);
    std::uniform_int_distribution<int> size(2, 12);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto t = random_task(rng, size(rng), trial % 2 == 0);
        CHECK(prauc(t) == oracle_prauc(t));
        CHECK(roauc(t) == oracle_roauc(t));
    }
}

TEST_CASE("confusion metrics") {
    SUBCASE("hand fixture") {
        // TP=2 FP=1 FN=1 TN=6 at threshold 0.5.
        const auto t = make_task({0.9, 0.8, 0.4, 0.7, 0.1, 0.2, 0.3, 0.1, 0.2, 0.3}, {1, 1, 1, 0, 0, 0, 0, 0, 0, 0});
        const auto c = confusion_at(t, 0.5);
        CHECK(c.tp == 2);
        CHECK(c.fp == 1);
        CHECK(c.fn == 1);
        CHECK(c.tn == 6);
        const auto m = metrics_from_confusion(c);
        CHECK(m.sensitivity == doctest::Approx(2.0 / 3.0));
        CHECK(m.specificity == doctest::Approx(6.0 / 7.0));
        CHECK(m.f1 == doctest::Approx(2.0 / 3.0));
        // (TP*TN - FP*FN) / sqrt((TP+FP)(TP+FN)(TN+FP)(TN+FN)) = 11 / sqrt(3*3*7*7)
        CHECK(std::abs(m.mcc - 11.0 / 21.0) < 5e-5);
        CHECK(m.mcc == doctest::Approx(11.0 / 21.0).epsilon(1e-14));
    }
    SUBCASE("perfect predictions") {
        const auto m = confusion_metrics(make_task({0.9, 0.8, 0.1}, {1, 1, 0}), 0.5);
        CHECK(m.sensitivity == 1.0);
        CHECK(m.specificity == 1.0);
        CHECK(m.f1 == 1.0);
        CHECK(m.mcc == 1.0);
    }
    SUBCASE("no predicted positives falls back to zero") {
        const auto m = confusion_metrics(make_task({0.3, 0.2, 0.1}, {1, 0, 0}), 0.9);
        CHECK(m.sensitivity == 0.0);
        CHECK(m.f1 == 0.0);
        CHECK(m.mcc == 0.0);
    }
    SUBCASE("MCC is symmetric under joint polarity swap") {
        Rng rng = make_rng(4, 0);
        std::uniform_int_distribution<long> k(0, 20);
        for (int i = 0; i < 100; ++i) {
            Confusion c{k(rng), k(rng), k(rng), k(rng)};
            Confusion swapped{c.tn, c.fn, c.fp, c.tp};
            CHECK(metrics_from_confusion(c).mcc == doctest::Approx(metrics_from_confusion(swapped).mcc).epsilon(1e-14));
            CHECK(metrics_from_confusion(c).mcc >= -1.0);
            CHECK(metrics_from_confusion(c).mcc <= 1.0);
        }
    }
}

TEST_CASE("F1-maximising threshold") {
    CHECK(calibrate_threshold(make_task({0.9, 0.6, 0.4}, {1, 1, 0})) == 0.6);
    CHECK(calibrate_threshold(make_task({0.95, 0.6, 0.4, 0.2}, {1, 0, 0, 0})) == 0.95);
    CHECK(calibrate_threshold(make_task({0.9, 0.8, 0.3, 0.2}, {1, 1, 0, 0})) == 0.8);
    CHECK_THROWS_AS(calibrate_threshold(make_task({0.9, 0.8}, {0, 0})), UndefinedMetric);
}

TEST_CASE("strictly increasing transforms leave ranking metrics and predictions unchanged") {
    Rng rng = make_rng(8, 0);
    for (int trial = 0; trial < 200; ++trial) {
        const auto t = random_task(rng, 12, trial % 3 == 0);
        auto g = t;
        g.scores = (t.scores.array() * 3.0).exp() - 7.0;
        CHECK(prauc(g) == doctest::Approx(prauc(t)).epsilon(1e-14));
        CHECK(roauc(g) == doctest::Approx(roauc(t)).epsilon(1e-14));
        const double th = calibrate_threshold(t), thg = calibrate_threshold(g);
        for (std::size_t i = 0; i < t.size(); ++i)
            CHECK((t.scores[static_cast<Eigen::Index>(i)] >= th) == (g.scores[static_cast<Eigen::Index>(i)] >= thg));
    }
}

TEST_CASE("percentile interpolates linearly") {
    CHECK(percentile({1, 2, 3, 4}, 50) == 2.5);
    CHECK(percentile({5}, 97.5) == 5.0);
    CHECK(percentile({0, 10}, 2.5) == doctest::Approx(0.25));
    CHECK(percentile({3, 1, 2}, 100) == 3.0);
}

TEST_CASE("bootstrap") {
    SUBCASE("degenerate distribution") {
        const auto t = make_task({0.4, 0.4, 0.4, 0.4, 0.4, 0.4}, {1, 0, 1, 0, 0, 1});
        const auto r = bootstrap_ci(t, metric_by_name("roauc"), {200, 3});
        CHECK(r.low == 0.5);
        CHECK(r.high == 0.5);
    }
    SUBCASE("deterministic and independent of worker count") {
        Rng rng = make_rng(2, 0);
        const auto t = random_task(rng, 40, false);
        BootstrapConfig c{300, 17};
        const auto a = bootstrap_ci(t, metric_by_name("prauc"), c);
        c.workers = 3;
        const auto b = bootstrap_ci(t, metric_by_name("prauc"), c);
        CHECK(a.low == b.low);
        CHECK(a.high == b.high);
        CHECK(a.replicates == b.replicates);
    }
    SUBCASE("three records against full enumeration") {
        const auto t = make_task({1.0, 2.0, 4.0}, {1, 0, 1});
        // The 27 ordered resamples, enumerated directly.
        std::vector<double> exact;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                for (int k = 0; k < 3; ++k) exact.push_back((t.scores[i] + t.scores[j] + t.scores[k]) / 3.0);
        std::sort(exact.begin(), exact.end());
        auto ex = bootstrap_ci_exhaustive(t, mean_score);
        std::sort(ex.replicates.begin(), ex.replicates.end());
        REQUIRE(ex.replicates.size() == 27);
        for (std::size_t i = 0; i < 27; ++i) CHECK(ex.replicates[i] == doctest::Approx(exact[i]).epsilon(1e-15));
        CHECK(ex.low == doctest::Approx(percentile(exact, 2.5)));
        CHECK(ex.high == doctest::Approx(percentile(exact, 97.5)));
        std::set<std::vector<int>> multisets;
        for (int i = 0; i < 3; ++i)
            for (int j = i; j < 3; ++j)
                for (int k = j; k < 3; ++k) multisets.insert({i, j, k});
        CHECK(multisets.size() == 10);
        // Sampled percentiles land on the quantiles of the exact distribution: each extreme has mass 1/27 > 2.5%.
        const auto sampled = bootstrap_ci(t, mean_score, {20000, 5});
        CHECK(sampled.low == doctest::Approx(exact.front()));
        CHECK(sampled.high == doctest::Approx(exact.back()));
    }
    SUBCASE("undefined replicates are redrawn, too few valid is an error") {
        const auto t = make_task({0.9, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.35}, {1, 0, 0, 0, 0, 0, 0, 0, 0, 0});
        const auto r = bootstrap_ci(t, metric_by_name("prauc"), {200, 1});
        CHECK(r.valid + r.skipped == 200);
        CHECK(r.valid >= 50);
        const auto single = make_task({0.9, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.35, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.35, 0.3,
                                       0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.35, 0.3, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.35, 0.3},
                                      std::vector<int>(40, 0));
        auto labs = single;
        labs.labels[0] = 1;
        BootstrapConfig c{60, 2};
        c.max_retries = 0;
        CHECK_THROWS_AS(bootstrap_ci(labs, metric_by_name("prauc"), c), UnstableCI);
    }
    SUBCASE("bounds bracket the point estimate") {
        Rng rng = make_rng(12, 0);
        int bracketed = 0;
        for (int trial = 0; trial < 100; ++trial) {
            const auto t = random_task(rng, 40, false);
            const double v = roauc(t);
            const auto r = bootstrap_ci(t, metric_by_name("roauc"), {200, static_cast<std::uint64_t>(trial)});
            bracketed += (r.low <= v && v <= r.high) ? 1 : 0;
        }
        CHECK(bracketed >= 99);
    }
}

TEST_CASE("paired permutation test") {
    SUBCASE("identical scores give p = 1") {
        const auto t = make_task({0.9, 0.2, 0.4, 0.7}, {1, 0, 0, 1});
        const auto r = paired_permutation_test(t, t, metric_by_name("prauc"), {500, 1});
        CHECK(r.delta == 0.0);
        CHECK(r.p_value == 1.0);
    }
    SUBCASE("sampled p is close to the exact enumeration") {
        Rng rng = make_rng(21, 0);
        std::uniform_real_distribution<double> u;
        for (int trial = 0; trial < 5; ++trial) {
            std::vector<double> sa(8), sb(8);
            std::vector<int> l = {1, 0, 1, 0, 1, 0, 0, 1};
            for (int i = 0; i < 8; ++i) {
                sa[static_cast<std::size_t>(i)] = u(rng) + 0.3 * l[static_cast<std::size_t>(i)];
                sb[static_cast<std::size_t>(i)] = u(rng);
            }
            const auto a = make_task(sa, l), b = make_task(sb, l);
            const auto metric = metric_by_name("roauc");
            const auto exact = paired_permutation_exact(a, b, metric);
            // Independent enumeration of the 256 swap patterns.
            const double obs = metric(a) - metric(b);
            int count = 0;
            for (int mask = 0; mask < 256; ++mask) {
                auto pa = a, pb = b;
                for (int i = 0; i < 8; ++i)
                    if (mask >> i & 1) std::swap(pa.scores[i], pb.scores[i]);
                count += std::abs(metric(pa) - metric(pb)) >= std::abs(obs) - 1e-12 ? 1 : 0;
            }
            CHECK(exact.p_value == doctest::Approx(count / 256.0));
            const auto sampled = paired_permutation_test(a, b, metric, {1000, static_cast<std::uint64_t>(trial)});
            CHECK(std::abs(sampled.p_value - exact.p_value) <= 0.05);
            const auto again = paired_permutation_test(a, b, metric, {1000, static_cast<std::uint64_t>(trial), 2});
            CHECK(again.p_value == sampled.p_value);
        }
    }
    SUBCASE("labels must agree") {
        const auto a = make_task({0.9, 0.2}, {1, 0}), b = make_task({0.9, 0.2}, {0, 1});
        CHECK_THROWS_AS(paired_permutation_test(a, b, metric_by_name("roauc")), AlignmentError);
    }
    CHECK(significance_marker(0.0005) == "***");
    CHECK(significance_marker(0.005) == "**");
    CHECK(significance_marker(0.02) == "*");
    CHECK(significance_marker(0.2) == "ns");
}

TEST_CASE("evaluate and reports") {
    Rng rng = make_rng(5, 0);
    auto a = random_task(rng, 30, false);
    a.task_id = "AF";
    EvalConfig cfg;
    cfg.bootstrap.n_boot = 100;
    const auto rep = evaluate({a}, nullptr, cfg);
    REQUIRE(rep.tasks.size() == 1);
    const auto& tr = rep.tasks[0];
    CHECK(tr.metrics.at("prauc").value == prauc(a));
    CHECK(tr.threshold == calibrate_threshold(a));
    for (const auto& [name, v] : tr.metrics) {
        CHECK(v.ci_low <= v.ci_high);
        CHECK(v.value >= (name == "mcc" ? -1.0 : 0.0));
        CHECK(v.value <= 1.0);
    }
    CHECK(report_text(rep).find("[task AF]") != std::string::npos);
    CHECK(report_csv(rep).rfind("task_id,metric,value,ci_low,ci_high,threshold\n", 0) == 0);

    auto cal = a;
    cal.scores.setConstant(0.25);
    std::vector<ScoredTask> cals = {cal};
    CHECK(evaluate({a}, &cals, cfg).tasks[0].threshold == 0.25);

    auto empty = a;
    empty.task_id = "LBBB";
    std::fill(empty.labels.begin(), empty.labels.end(), 0);
    try {
        evaluate({empty}, nullptr, cfg);
        FAIL("expected UndefinedMetric");
    } catch (const UndefinedMetric& e) {
        CHECK(std::string(e.what()).find("LBBB") != std::string::npos);
    }
}

TEST_CASE("comparison aligns by record id") {
    auto a = make_task({0.9, 0.1, 0.8, 0.3}, {1, 0, 1, 0}, "AF");
    auto b = make_task({0.2, 0.6, 0.7, 0.5}, {0, 1, 0, 1}, "AF");
    b.record_ids = {"r1", "r0", "r3", "r2"};
    b.labels = {0, 1, 0, 1};
    const auto rows = compare({a}, {b}, {"roauc"}, {200, 3});
    REQUIRE(rows.size() == 1);
    auto b_aligned = make_task({0.6, 0.2, 0.5, 0.7}, {1, 0, 1, 0}, "AF");
    CHECK(rows[0].value_b == roauc(b_aligned));
    CHECK(rows[0].delta == roauc(a) - roauc(b_aligned));
    CHECK(comparison_csv(rows).find("roauc") != std::string::npos);
}
