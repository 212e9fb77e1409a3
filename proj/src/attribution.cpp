#include "ecgclip/attribution.hpp"

#include "ecgclip/errors.hpp"

#include <cmath>
#include <limits>

namespace ecgclip {

AttributionMap integrated_gradients(const ScoreFn& f, const Eigen::MatrixXd& x, const IgConfig& config) {
    if (config.steps < 2) throw ConfigError("integrated gradients needs at least 2 steps");
    const auto m = static_cast<std::size_t>(config.steps);
    std::vector<Eigen::MatrixXd> grads(m);
    parallel_for(m, config.workers, [&](std::size_t k) {
        const double alpha = config.rule == IgRule::endpoint ? static_cast<double>(k + 1) / static_cast<double>(m)
                                                             : (static_cast<double>(k) + 0.5) / static_cast<double>(m);
        auto sg = f(alpha * x);
        if (sg.grad.rows() != x.rows() || sg.grad.cols() != x.cols()) throw ShapeError("score gradient has the wrong shape");
        if (!sg.grad.allFinite()) throw NumericError("non-finite gradient at integration step " + std::to_string(k + 1));
        grads[k] = std::move(sg.grad);
    });
    Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(x.rows(), x.cols());
    for (const auto& g : grads) sum += g;
    AttributionMap out;
    out.values = x.cwiseProduct(sum) / static_cast<double>(m);
    out.steps = config.steps;
    return out;
}

ScoreFn task_score_fn(const ModelParams& params, Eigen::Index task) {
    if (!params.has("head.weight")) throw ConfigError("model has no classification head");
    if (task < 0 || task >= params.block("head.weight").rows) throw ConfigError("task index out of range");
    return [&params, task](const Eigen::MatrixXd& x) {
        const auto tape = trunk_forward(params, x);
        const Eigen::VectorXd w = params.mat("head.weight").row(task).transpose();
        ScoreGrad sg;
        sg.value = w.dot(tape.features) + params.mat("head.bias")(task, 0);
        ModelParams scratch = params.zeros_like();
        trunk_backward(params, tape, w, scratch, &sg.grad);
        return sg;
    };
}

AttributionMap attribute(const ModelParams& params, Eigen::Index task, const std::string& task_id, const SignalTensor& x,
                         const IgConfig& config) {
    const Eigen::MatrixXd input = x.data.cast<double>();
    const auto f = task_score_fn(params, task);
    auto out = integrated_gradients(f, input, config);
    out.task = task_id;
    out.probability = 1.0 / (1.0 + std::exp(-f(input).value));
    return out;
}

AttributionMap positive_mask(const AttributionMap& attr) {
    AttributionMap out = attr;
    out.values = attr.values.cwiseMax(0.0);
    return out;
}

std::string attribution_csv(const AttributionMap& attr, const SignalTensor& x) {
    if (attr.values.rows() != x.data.rows() || attr.values.cols() != x.data.cols())
        throw ShapeError("attribution map does not match the waveform");
    const auto& leads = SignalTensor::lead_names();
    std::string out = "lead,sample_index,value,waveform_value\n";
    for (Eigen::Index l = 0; l < attr.values.rows(); ++l)
        for (Eigen::Index s = 0; s < attr.values.cols(); ++s)
            out += leads[static_cast<std::size_t>(l)] + "," + std::to_string(s) + "," + format_double(attr.values(l, s), 10) +
                   "," + format_double(x.data(l, s), 9) + "\n";
    return out;
}

// ---------------------------------------------------------------------------

Eigen::MatrixXd squared_distances(const Eigen::MatrixXd& x) {
    const Eigen::VectorXd sq = x.rowwise().squaredNorm();
    Eigen::MatrixXd d = (-2.0 * x * x.transpose()).colwise() + sq;
    d.rowwise() += sq.transpose();
    d = d.cwiseMax(0.0);
    d.diagonal().setZero();
    return d;
}

namespace {

// Entropy and probabilities of one row at precision beta; the row minimum is
// subtracted first so exp() cannot underflow to an all-zero row.
double row_entropy(const Eigen::VectorXd& d, Eigen::Index self, double beta, Eigen::VectorXd& p) {
    double dmin = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < d.size(); ++j)
        if (j != self) dmin = std::min(dmin, d[j]);
    double sum = 0.0, weighted = 0.0;
    for (Eigen::Index j = 0; j < d.size(); ++j) {
        if (j == self) {
            p[j] = 0.0;
            continue;
        }
        p[j] = std::exp(-beta * (d[j] - dmin));
        sum += p[j];
        weighted += p[j] * (d[j] - dmin);
    }
    p /= sum;
    return std::log(sum) + beta * weighted / sum;
}

}  // namespace

Affinities conditional_affinities(const Eigen::MatrixXd& sq_dist, double perplexity, double tol) {
    const Eigen::Index n = sq_dist.rows();
    if (n < 2) throw DegenerateInput("t-SNE needs at least two points");
    const double target = std::log(perplexity);
    Affinities a;
    a.p = Eigen::MatrixXd::Zero(n, n);
    a.beta = Eigen::VectorXd::Ones(n);
    a.entropy = Eigen::VectorXd::Zero(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::VectorXd d = sq_dist.row(i).transpose();
        Eigen::VectorXd p(n);
        double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
        double h = row_entropy(d, i, beta, p);
        for (int it = 0; it < 2000 && std::abs(h - target) > tol; ++it) {
            if (h > target) {
                lo = beta;
                beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
            h = row_entropy(d, i, beta, p);
        }
        if (std::abs(h - target) > tol)
            throw NumericError("perplexity bisection did not converge for point " + std::to_string(i));
        a.p.row(i) = p.transpose();
        a.beta[i] = beta;
        a.entropy[i] = h;
    }
    return a;
}

TsneLayout tsne(const Eigen::MatrixXd& x, const TsneConfig& config) {
    const Eigen::Index n = x.rows();
    if (n < 2) throw DegenerateInput("t-SNE needs at least two points");
    if (!x.allFinite()) throw DegenerateInput("t-SNE input contains non-finite values");
    bool all_equal = true;
    for (Eigen::Index i = 1; i < n && all_equal; ++i) all_equal = x.row(i) == x.row(0);
    if (all_equal) throw DegenerateInput("all t-SNE input rows are identical");
    if (config.iterations < 1 || !(config.perplexity > 0.0)) throw ConfigError("t-SNE needs positive iterations and perplexity");

    TsneLayout out;
    out.perplexity = config.perplexity;
    if (static_cast<double>(n) < 3.0 * config.perplexity) {
        out.perplexity = std::floor(static_cast<double>(n - 1) / 3.0);
        if (out.perplexity < 1.0) throw DegenerateInput("too few points for t-SNE");
        out.warnings.push_back("perplexity reduced from " + format_double(config.perplexity, 6) + " to " +
                               format_double(out.perplexity, 6) + " for " + std::to_string(n) + " points");
    }

    const auto aff = conditional_affinities(squared_distances(x), out.perplexity, config.entropy_tol);
    Eigen::MatrixXd p = (aff.p + aff.p.transpose()) / (2.0 * static_cast<double>(n));
    p = p.cwiseMax(1e-12);
    p.diagonal().setZero();

    Rng rng = make_rng(config.seed, 0x75e);
    std::normal_distribution<double> init(0.0, 1e-4);
    Eigen::MatrixXd y(n, 2);
    for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = init(rng);
    Eigen::MatrixXd update = Eigen::MatrixXd::Zero(n, 2);
    Eigen::MatrixXd gains = Eigen::MatrixXd::Ones(n, 2);

    for (int it = 0; it < config.iterations; ++it) {
        const double exag = it < config.exaggeration_iters ? config.early_exaggeration : 1.0;
        const double momentum = it < config.momentum_switch ? config.momentum_initial : config.momentum_final;
        Eigen::MatrixXd num = (1.0 + squared_distances(y).array()).inverse().matrix();
        num.diagonal().setZero();
        const double z = num.sum();
        const Eigen::MatrixXd q = (num / z).cwiseMax(1e-12);
        const Eigen::MatrixXd w = (exag * p - q).cwiseProduct(num);
        const Eigen::MatrixXd grad = 4.0 * (w.rowwise().sum().asDiagonal() * y - w * y);
        for (Eigen::Index k = 0; k < grad.size(); ++k) {
            const bool same = (grad.data()[k] > 0) == (update.data()[k] > 0);
            gains.data()[k] = same ? std::max(gains.data()[k] * 0.8, 0.01) : gains.data()[k] + 0.2;
        }
        update = momentum * update - config.learning_rate * gains.cwiseProduct(grad);
        y += update;
        y.rowwise() -= y.colwise().mean();
        if (!y.allFinite()) throw NumericError("t-SNE diverged at iteration " + std::to_string(it + 1));

        double kl = 0.0;
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < n; ++j)
                if (i != j) kl += p(i, j) * std::log(p(i, j) / q(i, j));
        out.kl_trace.push_back(kl);
    }
    out.y = y;
    out.iterations = config.iterations;
    out.kl = out.kl_trace.back();
    return out;
}

std::string layout_csv(const TsneLayout& layout, const std::vector<std::string>& record_ids,
                       const std::vector<std::string>& labels) {
    if (static_cast<Eigen::Index>(record_ids.size()) != layout.y.rows() || labels.size() != record_ids.size())
        throw ShapeError("layout rows do not match record ids and labels");
    std::string out = "record_id,x,y,label\n";
    for (std::size_t i = 0; i < record_ids.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        out += csv_line({record_ids[i], format_double(layout.y(r, 0), 10), format_double(layout.y(r, 1), 10), labels[i]});
    }
    return out;
}

}  // namespace ecgclip
