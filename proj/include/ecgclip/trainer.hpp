#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ecgclip/ecg_io.hpp"
#include "ecgclip/embedder.hpp"
#include "ecgclip/evalsuite.hpp"
#include "ecgclip/objectives.hpp"
#include "ecgclip/signal.hpp"

namespace ecgclip {

// ---------------------------------------------------------------------------
// Optimizer

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-5;
};

struct OptimizerState {
    Eigen::VectorXd m;
    Eigen::VectorXd v;
    long step = 0;
    AdamWConfig config;
    double lr = 0.0;

    static OptimizerState init(Eigen::Index size, const AdamWConfig& config);
};

// One AdamW update in place: w <- w - lr*wd*w, then the bias-corrected Adam step.
// Entries where `trainable` is false (when given) are left untouched. Throws
// NumericError before modifying anything when a gradient entry is not finite.
void adamw_step(Eigen::Ref<Eigen::VectorXd> params, const Eigen::Ref<const Eigen::VectorXd>& grads, OptimizerState& state,
                const std::vector<char>* trainable = nullptr);

// ---------------------------------------------------------------------------
// Learning-rate schedules

struct ScheduleSpec {
    enum class Mode { warm_restarts, warmup_cosine };

    Mode mode = Mode::warm_restarts;
    double peak = 2e-4;
    long t0 = 5000;
    double t_mult = 1.0;
    double eta_min = 1e-8;
    double warmup_start = 1e-6;
    long warmup_iters = 200;
    long total_iters = 4000;

    void validate() const;
    static ScheduleSpec pretrain_default();
    static ScheduleSpec finetune_default(long total_iters = 4000);
};

double lr_at(const ScheduleSpec& spec, long t);

// ---------------------------------------------------------------------------

// Fraction of rows whose best-matching report is their own; ties go to the lowest index.
template <typename DerivedE, typename DerivedR>
double retrieval_recall_at_1(const Eigen::MatrixBase<DerivedE>& e, const Eigen::MatrixBase<DerivedR>& r) {
    if (e.rows() < 1 || e.rows() != r.rows() || e.cols() != r.cols()) throw ShapeError("retrieval needs equal non-empty batches");
    const auto sim = (e * r.transpose()).eval();
    Eigen::Index hits = 0;
    for (Eigen::Index i = 0; i < sim.rows(); ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index j = 1; j < sim.cols(); ++j)
            if (sim(i, j) > sim(i, best)) best = j;
        if (best == i) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(sim.rows());
}

struct MetricRow {
    long iteration = 0;
    std::string split;
    std::string metric;
    double value = 0.0;
};

std::string metrics_csv(const std::vector<MetricRow>& rows);

// Network inputs for the given cohort records, preprocessed unless already tensors.
std::vector<SignalTensor> prepare_tensors(const Cohort& cohort, const std::vector<std::size_t>& indices,
                                          std::size_t workers = 1);

// ---------------------------------------------------------------------------
// Pretraining

struct PretrainConfig {
    EncoderConfig encoder;
    double tau = 0.07;
    double dropout = 0.1;
    LossWeights<double> weights;
    int batch_size = 32;
    int epochs = 20;
    long max_steps = 0;  // stop after this many optimizer steps when > 0
    ScheduleSpec schedule = ScheduleSpec::pretrain_default();
    AdamWConfig adamw;
    std::uint64_t seed = 0;
    std::size_t workers = 1;
    std::string train_split = "train";
    std::string val_split = "val";
};

struct BatchLoss {
    double value = 0.0;
    ModelParams grad;
};

// Combined loss and full gradient for a batch of (tensor, report) pairs.
// `step_seed` drives the dropout masks of the batch.
BatchLoss pretrain_batch_loss(const ModelParams& params, const std::vector<const SignalTensor*>& tensors,
                              const std::vector<const std::string*>& reports, const PretrainConfig& config,
                              std::uint64_t step_seed);

// Validation retrieval recall@1 with clean (mask-free) embeddings.
double evaluate_retrieval(const ModelParams& params, const std::vector<SignalTensor>& tensors,
                          const std::vector<std::string>& reports, std::size_t workers = 1);

struct TrainResult {
    Checkpoint best;
    double best_score = 0.0;
    double initial_score = 0.0;
    long best_iteration = 0;
    long steps = 0;
    std::vector<MetricRow> trajectory;
    std::vector<std::string> warnings;
    std::map<std::string, std::string> manifest;  // every hyperparameter, as text
};

TrainResult pretrain(const Cohort& cohort, const SplitPlan& splits, const PretrainConfig& config);
// Same as above on already prepared inputs (used by tests to avoid preprocessing twice).
TrainResult pretrain(const std::vector<SignalTensor>& train_x, const std::vector<std::string>& train_reports,
                     const std::vector<SignalTensor>& val_x, const std::vector<std::string>& val_reports,
                     const PretrainConfig& config);

// ---------------------------------------------------------------------------
// Fine-tuning: per-task sigmoid linear head on the encoder features.

struct FinetuneConfig {
    std::vector<std::string> tasks;
    bool full_finetune = false;  // false: linear probe on frozen encoder features
    int batch_size = 256;
    long iterations = 4000;
    int eval_interval = 200;
    ScheduleSpec schedule = ScheduleSpec::finetune_default();
    AdamWConfig adamw{0.9, 0.999, 1e-8, 5e-2};
    std::uint64_t seed = 0;
    std::size_t workers = 1;
    std::string train_split = "train";
    std::string val_split = "val";
};

// Adds zero-initialised head.weight [T x F] and head.bias [T x 1].
ModelParams attach_head(const ModelParams& encoder, std::size_t n_tasks);
std::vector<std::string> head_tasks(const Checkpoint& ckpt);

// Pre-sigmoid task scores for every task, [T].
Eigen::VectorXd task_logits(const ModelParams& params, const Eigen::Ref<const Eigen::MatrixXd>& x);

struct Labelled {
    std::vector<SignalTensor> x;
    std::vector<std::string> record_ids;
    std::vector<std::set<std::string>> labels;
};

// Sigmoid scores as ScoredTasks, one per head task.
std::vector<ScoredTask> predict(const Checkpoint& ckpt, const Labelled& data, std::size_t workers = 1);

// Macro-PRAUC over tasks with at least one positive; excluded tasks are appended to `warnings`.
double macro_prauc(const std::vector<ScoredTask>& tasks, std::vector<std::string>* warnings = nullptr);

TrainResult finetune(const Checkpoint& encoder, const Cohort& cohort, const SplitPlan& splits, const FinetuneConfig& config);
TrainResult finetune(const Checkpoint& encoder, const Labelled& train, const Labelled& val, const FinetuneConfig& config);

Labelled labelled_split(const Cohort& cohort, const SplitPlan& splits, const std::string& split, std::size_t workers = 1);

std::string manifest_text(const std::map<std::string, std::string>& manifest);

}  // namespace ecgclip
