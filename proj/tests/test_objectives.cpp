#include "doctest.h"

#include "ecgclip/objectives.hpp"

#include <cmath>

using namespace ecgclip;

namespace {

Eigen::MatrixXd unit_rows(Eigen::Index n, Eigen::Index d, std::uint64_t seed) {
    Rng rng = make_rng(seed, 3);
    std::normal_distribution<double> g;
    Eigen::MatrixXd m(n, d);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
    m.rowwise().normalize();
    return m;
}

// Direct evaluation of the symmetric loss from its definition, one term at a time.
double reference_loss(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double tau) {
    const Eigen::Index n = a.rows();
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        double row = 0.0, col = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) {
            row += std::exp(a.row(i).dot(b.row(j)) / tau);
            col += std::exp(a.row(j).dot(b.row(i)) / tau);
        }
        const double pos = std::exp(a.row(i).dot(b.row(i)) / tau);
        total += -std::log(pos / row) - std::log(pos / col);
    }
    return total / (2.0 * static_cast<double>(n));
}

}  // namespace

TEST_CASE("single pair has zero loss") {
    const auto a = unit_rows(1, 4, 1);
    CHECK(info_nce(a, a, 0.07).value == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(info_nce(a, unit_rows(1, 4, 2), 0.5).value == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("two orthogonal pairs at unit temperature") {
    Eigen::MatrixXd a(2, 2);
    a << 1, 0, 0, 1;
    CHECK(info_nce(a, a, 1.0).value == doctest::Approx(std::log(1.0 + std::exp(-1.0))).epsilon(1e-14));
}

TEST_CASE("loss matches the direct definition") {
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto a = unit_rows(6, 5, s), b = unit_rows(6, 5, s + 100);
        for (double tau : {0.07, 0.3, 1.0})
            CHECK(info_nce(a, b, tau).value == doctest::Approx(reference_loss(a, b, tau)).epsilon(1e-12));
    }
}

TEST_CASE("loss is invariant to joint permutation and symmetric in its arguments") {
    const auto a = unit_rows(7, 4, 9), b = unit_rows(7, 4, 10);
    Eigen::PermutationMatrix<Eigen::Dynamic> perm(7);
    perm.setIdentity();
    Rng rng = make_rng(4, 0);
    std::shuffle(perm.indices().data(), perm.indices().data() + 7, rng);
    const Eigen::MatrixXd pa = perm * a, pb = perm * b;
    const double base = info_nce(a, b, 0.2).value;
    CHECK(info_nce(pa, pb, 0.2).value == doctest::Approx(base).epsilon(1e-12));
    CHECK(info_nce(b, a, 0.2).value == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("gradients match central differences") {
    const auto a = unit_rows(5, 4, 21), b = unit_rows(5, 4, 22);
    for (double tau : {0.07, 0.5}) {
        const auto out = info_nce(a, b, tau);
        const double h = 1e-7;
        for (int which = 0; which < 2; ++which) {
            for (Eigen::Index k = 0; k < a.size(); ++k) {
                Eigen::MatrixXd ap = a, am = a, bp = b, bm = b;
                if (which == 0) {
                    ap.data()[k] += h;
                    am.data()[k] -= h;
                } else {
                    bp.data()[k] += h;
                    bm.data()[k] -= h;
                }
                const double fd = (reference_loss(ap, bp, tau) - reference_loss(am, bm, tau)) / (2 * h);
                CHECK(std::abs(fd - out.grads[static_cast<std::size_t>(which)].data()[k]) < 1e-6);
            }
        }
    }
}

TEST_CASE("stable at low temperature with nearly identical rows") {
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(4, 3);
    a.col(0).setOnes();
    const auto out = info_nce(a, a, 0.001);
    CHECK(std::isfinite(out.value));
    CHECK(out.value == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    CHECK(out.grads[0].allFinite());
}

TEST_CASE("well aligned pairs give a small loss") {
    // Pairs at cosine 0.99, different pairs orthogonal.
    const Eigen::Index n = 6, d = 12;
    Eigen::MatrixXd e = Eigen::MatrixXd::Zero(n, d), r = Eigen::MatrixXd::Zero(n, d);
    const double c = 0.99, s = std::sqrt(1.0 - c * c);
    for (Eigen::Index i = 0; i < n; ++i) {
        e(i, i) = 1.0;
        r(i, i) = c;
        r(i, n + i) = s;
    }
    CHECK(info_nce(e, r, 0.07).value < 0.01);
}

TEST_CASE("combined loss is the weighted sum of its parts") {
    const auto e = unit_rows(5, 6, 1), r = unit_rows(5, 6, 2), eh = unit_rows(5, 6, 3), et = unit_rows(5, 6, 4);
    const auto c = cma_loss(e, r, 0.07), u = uma_loss(eh, et, 0.07);
    const auto both = combined_loss<double>(e, r, eh, et, 0.07);
    CHECK(both.value == doctest::Approx(c.value + u.value).epsilon(1e-15));
    REQUIRE(both.grads.size() == 4);
    CHECK(both.grads[0] == c.grads[0]);
    CHECK(both.grads[3] == u.grads[1]);
    const auto weighted = combined_loss<double>(e, r, eh, et, 0.07, {0.25, 2.0});
    CHECK(weighted.value == doctest::Approx(0.25 * c.value + 2.0 * u.value).epsilon(1e-15));
    CHECK((weighted.grads[2] - 2.0 * u.grads[0]).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("float batches use the same code path") {
    const Eigen::MatrixXf a = unit_rows(3, 4, 5).cast<float>(), b = unit_rows(3, 4, 6).cast<float>();
    const auto out = info_nce(a, b, 0.1f);
    CHECK(out.value == doctest::Approx(reference_loss(a.cast<double>(), b.cast<double>(), 0.1)).epsilon(1e-5));
}

TEST_CASE("invalid inputs") {
    const auto a = unit_rows(3, 4, 5);
    CHECK_THROWS_AS(info_nce(a, a, 0.0), InvalidTemperature);
    CHECK_THROWS_AS(info_nce(a, a, -0.1), InvalidTemperature);
    CHECK_THROWS_AS(info_nce(a, unit_rows(2, 4, 1), 0.1), ShapeError);
    CHECK_THROWS_AS(info_nce(Eigen::MatrixXd(0, 4), Eigen::MatrixXd(0, 4), 0.1), ShapeError);
    Eigen::MatrixXd bad = a;
    bad.row(1) *= 1.01;
    CHECK_THROWS_AS(info_nce(bad, a, 0.1), NormalizationError);
}
