#include "doctest.h"

#include "ecgclip/attribution.hpp"
#include "ecgclip/errors.hpp"
#include "ecgclip/trainer.hpp"

#include <cmath>

using namespace ecgclip;

namespace {

Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double sd = 1.0) {
    Rng rng = make_rng(seed, 6);
    std::normal_distribution<double> g(0.0, sd);
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
    return m;
}

ScoreFn linear_fn(const Eigen::MatrixXd& w, double b) {
    return [w, b](const Eigen::MatrixXd& x) { return ScoreGrad{w.cwiseProduct(x).sum() + b, w}; };
}

ModelParams classifier(std::uint64_t seed) {
    EncoderConfig cfg;
    cfg.channels = {4, 8};
    auto p = attach_head(init_model(cfg, seed), 2);
    p.mat("head.weight") = random_matrix(2, 8, seed + 1);
    p.mat("head.bias").setConstant(0.1);
    return p;
}

SignalTensor tensor_of(const Eigen::MatrixXd& m) {
    SignalTensor t;
    t.data = m.cast<float>();
    return t;
}

}  // namespace

TEST_CASE("IG of a linear map is weight times input for every step count") {
    const auto w = random_matrix(3, 7, 1), x = random_matrix(3, 7, 2);
    for (int m : {2, 3, 16, 128}) {
        for (auto rule : {IgRule::endpoint, IgRule::midpoint}) {
            const auto a = integrated_gradients(linear_fn(w, 0.3), x, {m, rule});
            CHECK((a.values - w.cwiseProduct(x)).cwiseAbs().maxCoeff() < 1e-10);
            CHECK(a.steps == m);
        }
    }
}

TEST_CASE("IG at the zero input is zero") {
    const auto p = classifier(3);
    const auto a = integrated_gradients(task_score_fn(p, 0), Eigen::MatrixXd::Zero(8, 200));
    CHECK(a.values.isZero());
}

TEST_CASE("IG needs at least two steps and finite gradients") {
    const auto w = random_matrix(2, 2, 1);
    CHECK_THROWS_AS(integrated_gradients(linear_fn(w, 0), w, {1}), ConfigError);
    ScoreFn bad = [](const Eigen::MatrixXd& x) {
        return ScoreGrad{0.0, Eigen::MatrixXd::Constant(x.rows(), x.cols(), std::nan(""))};
    };
    try {
        integrated_gradients(bad, w, {4});
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("step") != std::string::npos);
    }
}

TEST_CASE("task score gradient matches central differences") {
    const auto p = classifier(5);
    const Eigen::MatrixXd x = random_matrix(8, 120, 4, 0.5);
    const auto f = task_score_fn(p, 1);
    const auto sg = f(x);
    CHECK(sg.value == doctest::Approx(task_logits(p, x)[1]).epsilon(1e-14));
    const double h = 1e-6;
    for (Eigen::Index k = 0; k < x.size(); k += 37) {
        Eigen::MatrixXd xp = x, xm = x;
        xp.data()[k] += h;
        xm.data()[k] -= h;
        const double fd = (f(xp).value - f(xm).value) / (2 * h);
        CHECK(std::abs(fd - sg.grad.data()[k]) <= 1e-7 + 1e-5 * std::abs(fd));
    }
}

TEST_CASE("completeness on the network") {
    const auto p = classifier(9);
    const Eigen::MatrixXd x = random_matrix(8, 5000, 10, 0.3);
    const auto f = task_score_fn(p, 0);
    const double gap = f(x).value - f(Eigen::MatrixXd::Zero(8, 5000)).value;
    const auto a = integrated_gradients(f, x, {128});
    const double rel = std::abs(a.values.sum() - gap) / std::abs(gap);
    INFO("relative completeness residual " << rel);
    CHECK(rel < 1e-3);
}

TEST_CASE("IG is linear in the model and covariant under head scaling") {
    auto p = classifier(12);
    const Eigen::MatrixXd x = random_matrix(8, 300, 13, 0.4);
    const auto f0 = task_score_fn(p, 0), f1 = task_score_fn(p, 1);
    ScoreFn sum = [&](const Eigen::MatrixXd& z) {
        auto a = f0(z), b = f1(z);
        return ScoreGrad{a.value + b.value, a.grad + b.grad};
    };
    const auto a0 = integrated_gradients(f0, x, {32}), a1 = integrated_gradients(f1, x, {32});
    const auto as = integrated_gradients(sum, x, {32});
    CHECK((as.values - a0.values - a1.values).cwiseAbs().maxCoeff() < 1e-12);

    auto scaled = p;
    scaled.mat("head.weight") *= 2.5;
    const auto a2 = integrated_gradients(task_score_fn(scaled, 0), x, {32});
    CHECK((a2.values - 2.5 * a0.values).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("attribute fills probability and task") {
    const auto p = classifier(2);
    const auto t = tensor_of(random_matrix(8, 5000, 3, 0.2));
    const auto a = attribute(p, 1, "LBBB", t, {8});
    CHECK(a.task == "LBBB");
    const double z = task_logits(p, t.data.cast<double>())[1];
    CHECK(a.probability == doctest::Approx(1.0 / (1.0 + std::exp(-z))));
    CHECK(a.values.rows() == 8);
    CHECK(a.values.cols() == 5000);
    const auto csv = attribution_csv(a, t);
    CHECK(csv.rfind("lead,sample_index,value,waveform_value\n", 0) == 0);
}

TEST_CASE("positive mask") {
    AttributionMap a;
    a.values = Eigen::MatrixXd(1, 3);
    a.values << -1, 2, 0;
    const auto m = positive_mask(a);
    CHECK(m.values(0, 0) == 0.0);
    CHECK(m.values(0, 1) == 2.0);
    CHECK(m.values(0, 2) == 0.0);
    a.values = -Eigen::MatrixXd::Ones(2, 2);
    CHECK(positive_mask(a).values.isZero());
    a.values = random_matrix(3, 5, 1);
    CHECK(positive_mask(positive_mask(a)).values == positive_mask(a).values);
}

TEST_CASE("perplexity bisection") {
    SUBCASE("entropy hits log perplexity") {
        const auto d = squared_distances(random_matrix(80, 5, 3));
        const auto aff = conditional_affinities(d, 20.0);
        for (Eigen::Index i = 0; i < 80; ++i) {
            CHECK(std::abs(aff.entropy[i] - std::log(20.0)) <= 1e-5);
            CHECK(aff.p(i, i) == 0.0);
            CHECK(aff.p.row(i).sum() == doctest::Approx(1.0));
            // Entropy recomputed from the returned row.
            double h = 0.0;
            for (Eigen::Index j = 0; j < 80; ++j)
                if (aff.p(i, j) > 0) h -= aff.p(i, j) * std::log(aff.p(i, j));
            CHECK(std::abs(h - std::log(20.0)) <= 1e-5);
        }
    }
    SUBCASE("uniform distances give equal precision") {
        const Eigen::MatrixXd d = Eigen::MatrixXd::Constant(10, 10, 4.0) - 4.0 * Eigen::MatrixXd::Identity(10, 10);
        const auto aff = conditional_affinities(d, 3.0);
        for (Eigen::Index i = 1; i < 10; ++i) CHECK(aff.beta[i] == aff.beta[0]);
        // The simplex vertices of the unit-distance case, too.
        const auto simplex = squared_distances(Eigen::MatrixXd::Identity(12, 12));
        const auto as = conditional_affinities(simplex, 4.0);
        for (Eigen::Index i = 1; i < 12; ++i) CHECK(as.beta[i] == as.beta[0]);
    }
}

TEST_CASE("t-SNE separates two clusters") {
    const Eigen::Index n = 100, d = 16;
    Eigen::MatrixXd x = random_matrix(n, d, 7);
    std::vector<int> cls(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        cls[static_cast<std::size_t>(i)] = i < n / 2 ? 0 : 1;
        if (i >= n / 2) x(i, 0) += 10.0;
    }
    TsneConfig cfg;
    cfg.seed = 1;
    const auto lay = tsne(x, cfg);
    REQUIRE(lay.y.rows() == n);
    REQUIRE(lay.y.cols() == 2);
    CHECK(lay.y.allFinite());
    CHECK(lay.kl >= 0.0);
    Eigen::RowVector2d c0 = Eigen::RowVector2d::Zero(), c1 = Eigen::RowVector2d::Zero();
    for (Eigen::Index i = 0; i < n; ++i) (cls[static_cast<std::size_t>(i)] ? c1 : c0) += lay.y.row(i);
    c0 /= n / 2.0;
    c1 /= n / 2.0;
    int correct = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const int guess = (lay.y.row(i) - c1).norm() < (lay.y.row(i) - c0).norm() ? 1 : 0;
        correct += guess == cls[static_cast<std::size_t>(i)] ? 1 : 0;
    }
    CHECK(correct >= 95);

    REQUIRE(lay.kl_trace.size() == 1000);
    const double tail = std::accumulate(lay.kl_trace.end() - 100, lay.kl_trace.end(), 0.0) / 100.0;
    const double best = *std::min_element(lay.kl_trace.begin(), lay.kl_trace.end());
    CHECK(tail <= 1.05 * best);
}

TEST_CASE("t-SNE input checks") {
    CHECK_THROWS_AS(tsne(Eigen::MatrixXd::Ones(20, 3)), DegenerateInput);
    TsneConfig cfg;
    cfg.iterations = 50;
    const auto lay = tsne(random_matrix(40, 3, 1), cfg);
    CHECK(lay.perplexity == 13.0);
    CHECK_FALSE(lay.warnings.empty());
    const auto csv = layout_csv(lay, std::vector<std::string>(40, "r"), std::vector<std::string>(40, "AF"));
    CHECK(csv.rfind("record_id,x,y,label\n", 0) == 0);
}
