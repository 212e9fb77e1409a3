#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ecgclip/embedder.hpp"
#include "ecgclip/signal.hpp"

namespace ecgclip {

struct AttributionMap {
    Eigen::MatrixXd values;  // same shape as the input
    std::string task;
    double probability = 0.0;
    int steps = 0;
};

// A scalar model output and its gradient with respect to the input.
struct ScoreGrad {
    double value = 0.0;
    Eigen::MatrixXd grad;
};
using ScoreFn = std::function<ScoreGrad(const Eigen::MatrixXd&)>;

// Path points alpha_k: endpoint uses k/m (k = 1..m), midpoint uses (k - 1/2)/m.
enum class IgRule { endpoint, midpoint };

struct IgConfig {
    int steps = 128;
    IgRule rule = IgRule::midpoint;
    std::size_t workers = 1;
};

// Zero-baseline Integrated Gradients: x * mean_k grad f(alpha_k x).
AttributionMap integrated_gradients(const ScoreFn& f, const Eigen::MatrixXd& x, const IgConfig& config = {});

// Pre-sigmoid score of one head task, with its input gradient.
ScoreFn task_score_fn(const ModelParams& params, Eigen::Index task);

// IG of a classifier task on one preprocessed input; fills task and probability.
AttributionMap attribute(const ModelParams& params, Eigen::Index task, const std::string& task_id, const SignalTensor& x,
                         const IgConfig& config = {});

// Negative entries set to zero.
AttributionMap positive_mask(const AttributionMap& attr);

std::string attribution_csv(const AttributionMap& attr, const SignalTensor& x);

// ---------------------------------------------------------------------------
// Exact t-SNE

struct TsneConfig {
    double perplexity = 30.0;
    int iterations = 1000;
    double learning_rate = 200.0;
    double early_exaggeration = 12.0;
    int exaggeration_iters = 250;
    double momentum_initial = 0.5;
    double momentum_final = 0.8;
    int momentum_switch = 250;
    double entropy_tol = 1e-5;
    std::uint64_t seed = 0;
};

struct TsneLayout {
    Eigen::MatrixXd y;  // N x 2
    double perplexity = 0.0;
    int iterations = 0;
    double kl = 0.0;
    std::vector<double> kl_trace;  // KL(P || Q) after each iteration, exaggeration removed
    std::vector<std::string> warnings;
};

struct Affinities {
    Eigen::MatrixXd p;               // row-conditional probabilities, zero diagonal
    Eigen::VectorXd beta;            // per-point precision 1 / (2 sigma^2)
    Eigen::VectorXd entropy;         // natural-log entropy per row
};

// Per-row bisection on beta so each conditional distribution has entropy log(perplexity).
Affinities conditional_affinities(const Eigen::MatrixXd& sq_dist, double perplexity, double tol = 1e-5);

Eigen::MatrixXd squared_distances(const Eigen::MatrixXd& x);

TsneLayout tsne(const Eigen::MatrixXd& x, const TsneConfig& config = {});

std::string layout_csv(const TsneLayout& layout, const std::vector<std::string>& record_ids,
                       const std::vector<std::string>& labels);

}  // namespace ecgclip
