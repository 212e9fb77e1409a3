#include "doctest.h"

#include "ecgclip/embedder.hpp"
#include "ecgclip/errors.hpp"

#include <cmath>

using namespace ecgclip;

namespace {

EncoderConfig small_config() {
    EncoderConfig c;
    c.channels = {3, 4};
    c.kernel = 5;
    c.stride = 2;
    c.proj_hidden = 6;
    c.embed_dim = 5;
    c.text_buckets = 64;
    c.text_hidden = 7;
    return c;
}

Eigen::MatrixXd random_input(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
    Rng rng = make_rng(seed, 2);
    std::normal_distribution<double> g;
    Eigen::MatrixXd x(rows, cols);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = g(rng);
    return x;
}

SignalTensor random_tensor(std::uint64_t seed) {
    SignalTensor t;
    t.data = random_input(8, 5000, seed).cast<float>() * 0.3f;
    return t;
}

// Scalar probe: <c, embedding(x)>.
double signal_objective(const ModelParams& p, const Eigen::MatrixXd& x, const Eigen::VectorXd& c) {
    const auto tape = trunk_forward(p, x);
    return c.dot(projector_forward(p, "proj_ecg", tape.features).embedding);
}

double text_objective(const ModelParams& p, const std::string& report, const Eigen::VectorXd& c) {
    return c.dot(text_forward(p, report).proj.embedding);
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(1e-8, std::abs(a) + std::abs(b)); }

}  // namespace

TEST_CASE("embeddings have unit norm") {
    const auto p = init_model(EncoderConfig{}, 1);
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto e = encode_signal(p, random_tensor(s));
        CHECK(e.values.size() == 64);
        CHECK(e.values.norm() == doctest::Approx(1.0).epsilon(1e-12));
    }
    for (const auto* report : {"Atrial fibrillation.", "", "sinus rhythm. normal axis"}) {
        const auto e = encode_text(p, report);
        CHECK(e.values.norm() == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("signal path gradients match central differences") {
    const auto cfg = small_config();
    auto p = init_model(cfg, 4);
    p.mat("feat.center").col(0) = Eigen::VectorXd::LinSpaced(4, 0.2, 0.8);
    p.mat("feat.scale").col(0) = Eigen::VectorXd::LinSpaced(4, 3.0, 0.5);
    const Eigen::MatrixXd x = random_input(cfg.in_leads, 40, 9);
    Rng rng = make_rng(5, 0);
    std::normal_distribution<double> g;
    Eigen::VectorXd c(cfg.embed_dim);
    for (auto& v : c) v = g(rng);

    auto grad = p.zeros_like();
    const auto tape = trunk_forward(p, x);
    const auto ptape = projector_forward(p, "proj_ecg", tape.features);
    const Eigen::VectorXd dh = projector_backward(p, "proj_ecg", ptape, c, grad);
    Eigen::MatrixXd dx;
    trunk_backward(p, tape, dh, grad, &dx);

    const double h = 1e-6;
    int checked = 0;
    for (const auto& b : p.layout()) {
        if (b.name.rfind("text", 0) == 0 || b.name.rfind("proj_text", 0) == 0) continue;
        for (Eigen::Index k = 0; k < b.size(); k += std::max<Eigen::Index>(1, b.size() / 7)) {
            const Eigen::Index i = b.offset + k;
            const double v0 = p.values()[i];
            p.values()[i] = v0 + h;
            const double fp = signal_objective(p, x, c);
            p.values()[i] = v0 - h;
            const double fm = signal_objective(p, x, c);
            p.values()[i] = v0;
            const double fd = (fp - fm) / (2 * h);
            INFO(b.name << "[" << k << "] analytic " << grad.values()[i] << " numeric " << fd);
            CHECK((rel_err(fd, grad.values()[i]) < 1e-5 || std::abs(fd - grad.values()[i]) < 1e-9));
            ++checked;
        }
    }
    CHECK(checked > 40);

    Eigen::MatrixXd xp = x;
    for (Eigen::Index k = 0; k < x.size(); k += 17) {
        const double v0 = xp.data()[k];
        xp.data()[k] = v0 + h;
        const double fp = signal_objective(p, xp, c);
        xp.data()[k] = v0 - h;
        const double fm = signal_objective(p, xp, c);
        xp.data()[k] = v0;
        const double fd = (fp - fm) / (2 * h);
        CHECK((rel_err(fd, dx.data()[k]) < 1e-5 || std::abs(fd - dx.data()[k]) < 1e-9));
    }
}

TEST_CASE("text path gradients match central differences") {
    const auto cfg = small_config();
    auto p = init_model(cfg, 6);
    const std::string report = "Left bundle branch block. Atrial fibrillation with rapid response.";
    Eigen::VectorXd c = Eigen::VectorXd::LinSpaced(cfg.embed_dim, -1.0, 1.5);
    auto grad = p.zeros_like();
    const auto tape = text_forward(p, report);
    text_backward(p, tape, c, grad);
    const double h = 1e-6;
    for (const auto& name : {"text.weight", "text.bias", "proj_text.w1", "proj_text.b1", "proj_text.w2", "proj_text.b2"}) {
        const auto& b = p.block(name);
        for (Eigen::Index k = 0; k < b.size(); k += std::max<Eigen::Index>(1, b.size() / 11)) {
            const Eigen::Index i = b.offset + k;
            const double v0 = p.values()[i];
            p.values()[i] = v0 + h;
            const double fp = text_objective(p, report, c);
            p.values()[i] = v0 - h;
            const double fm = text_objective(p, report, c);
            p.values()[i] = v0;
            const double fd = (fp - fm) / (2 * h);
            INFO(name << "[" << k << "]");
            CHECK((rel_err(fd, grad.values()[i]) < 1e-5 || std::abs(fd - grad.values()[i]) < 1e-9));
        }
    }
}

TEST_CASE("feature calibration standardises the pooled features") {
    auto p = init_model(small_config(), 6);
    CHECK(trunk_forward(p, random_input(8, 300, 1)).features == trunk_forward(p, random_input(8, 300, 1)).pooled);
    std::vector<SignalTensor> xs;
    for (std::uint64_t s = 0; s < 12; ++s) {
        SignalTensor t;
        t.data = (random_input(8, 300, 20 + s) * (0.5 + 0.1 * static_cast<double>(s))).cast<float>();
        xs.push_back(t);
    }
    calibrate_feature_norm(p, xs);
    Eigen::MatrixXd f(12, 4);
    for (std::size_t i = 0; i < xs.size(); ++i)
        f.row(static_cast<Eigen::Index>(i)) = trunk_forward(p, xs[i].data.cast<double>()).features.transpose();
    const Eigen::RowVectorXd mean = f.colwise().mean();
    const Eigen::RowVectorXd var = (f.rowwise() - mean).colwise().squaredNorm() / 12.0;
    CHECK(mean.cwiseAbs().maxCoeff() < 1e-9);
    CHECK((var.array() - 1.0).abs().maxCoeff() < 1e-9);
    CHECK_THROWS_AS(calibrate_feature_norm(p, {xs[0]}), ShapeError);
}

TEST_CASE("dropout masks") {
    SUBCASE("p = 0 leaves the embedding unchanged") {
        const auto p = init_model(EncoderConfig{}, 2);
        const auto t = random_tensor(3);
        const auto clean = encode_signal(p, t);
        const auto [a, b] = dropout_views(p, t, 0.0, 77);
        CHECK(a.values == clean.values);
        CHECK(b.values == clean.values);
    }
    SUBCASE("views are deterministic in the seed and differ from each other") {
        const auto p = init_model(EncoderConfig{}, 2);
        const auto t = random_tensor(4);
        const auto [a1, b1] = dropout_views(p, t, 0.1, 5);
        const auto [a2, b2] = dropout_views(p, t, 0.1, 5);
        CHECK(a1.values == a2.values);
        CHECK(b1.values == b2.values);
        CHECK(a1.values != b1.values);
    }
    SUBCASE("drop fraction is close to p") {
        Rng rng = make_rng(11, 0);
        const auto m = DropoutMask::draw(100000, 0.1, rng);
        const double dropped = static_cast<double>((m.scale.array() == 0.0).count()) / 100000.0;
        CHECK(std::abs(dropped - 0.1) <= 0.02);
        for (auto v : m.scale) CHECK((v == 0.0 || std::abs(v - 1.0 / 0.9) < 1e-15));
        CHECK_THROWS_AS(DropoutMask::draw(4, 1.0, rng), InvalidRate);
    }
}

TEST_CASE("projector output is invariant to positive rescaling of its pre-normalised output") {
    // Scaling the last affine layer by a positive constant leaves the embedding unchanged.
    const auto cfg = small_config();
    auto p = init_model(cfg, 8);
    const Eigen::MatrixXd x = random_input(cfg.in_leads, 32, 1);
    const auto h = trunk_forward(p, x).features;
    const auto e1 = projector_forward(p, "proj_ecg", h).embedding;
    p.mat("proj_ecg.w2") *= 3.5;
    p.mat("proj_ecg.b2") *= 3.5;
    const auto e2 = projector_forward(p, "proj_ecg", h).embedding;
    CHECK((e1 - e2).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("text tokenizer and bag") {
    const auto toks = tokenize("Atrial-fibrillation, LBBB; 2nd degree!");
    REQUIRE(toks.size() >= 4);
    CHECK(toks[0] == "atrial");
    const auto bag = bag_of_words("sinus sinus rhythm", 1024);
    CHECK(bag.norm() == doctest::Approx(1.0));
    CHECK(bag[static_cast<Eigen::Index>(token_bucket("sinus", 1024))] > bag[static_cast<Eigen::Index>(token_bucket("rhythm", 1024))]);
    CHECK(bag_of_words("", 1024).norm() == doctest::Approx(1.0));
    CHECK(bag_of_words("ATRIAL", 64) == bag_of_words("atrial", 64));
}

TEST_CASE("checkpoint round trip") {
    Checkpoint ck;
    ck.params = init_model(small_config(), 12);
    ck.meta["tasks"] = "AF,LBBB";
    ck.meta["selected_iteration"] = "40";
    const auto bytes = serialize_checkpoint(ck);
    const auto back = parse_checkpoint(bytes);
    CHECK(back.params == ck.params);
    CHECK(back.meta == ck.meta);
    const auto cfg = config_from_layout(back.params);
    CHECK(cfg.channels == small_config().channels);
    CHECK(cfg.kernel == 5);
    CHECK(cfg.stride == 2);
    CHECK(cfg.embed_dim == 5);

    auto corrupt = bytes;
    corrupt[corrupt.size() - 3] ^= 0x10;
    CHECK_THROWS_AS(parse_checkpoint(corrupt), FormatError);
    CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, bytes.size() - 8)), FormatError);
    CHECK_THROWS_AS(parse_checkpoint("hello"), FormatError);
}

TEST_CASE("non-finite activations name the layer") {
    auto p = init_model(small_config(), 3);
    p.mat("conv1.weight")(0, 0) = std::numeric_limits<double>::infinity();
    try {
        trunk_forward(p, random_input(8, 30, 2));
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("conv1") != std::string::npos);
    }
}
