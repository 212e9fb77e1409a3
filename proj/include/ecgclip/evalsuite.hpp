#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ecgclip/util.hpp"

namespace ecgclip {

struct ScoredTask {
    std::string task_id;
    std::vector<std::string> record_ids;
    Eigen::VectorXd scores;
    std::vector<int> labels;
    // Optional cluster ids (e.g. patient) for cluster bootstrap; empty means per record.
    std::vector<std::string> groups;

    std::size_t size() const { return labels.size(); }
    std::size_t positives() const;
    void validate() const;
    ScoredTask subset(const std::vector<std::size_t>& idx) const;
};

// Step-function average precision; tied scores form one threshold.
double prauc(const ScoredTask& task);
// Mann-Whitney: P(s+ > s-) + P(s+ == s-)/2.
double roauc(const ScoredTask& task);

struct Confusion {
    long tp = 0, fp = 0, fn = 0, tn = 0;
};

struct ConfusionMetrics {
    double sensitivity = 0.0;
    double specificity = 0.0;
    double f1 = 0.0;
    double mcc = 0.0;
};

Confusion confusion_at(const ScoredTask& task, double threshold);  // predicted positive when score >= threshold
ConfusionMetrics metrics_from_confusion(const Confusion& c);
ConfusionMetrics confusion_metrics(const ScoredTask& task, double threshold);

// F1-argmax over distinct scores; ties go to the largest threshold.
double calibrate_threshold(const ScoredTask& validation);

using MetricFn = std::function<double(const ScoredTask&)>;
// prauc, roauc, sensitivity, specificity, f1, mcc (the last four at `threshold`).
MetricFn metric_by_name(const std::string& name, double threshold = 0.5);
const std::vector<std::string>& metric_names();

struct BootstrapConfig {
    int n_boot = 1000;
    std::uint64_t seed = 0;
    int max_retries = 10;
    int min_valid = 50;
    double alpha = 0.05;
    bool by_group = false;
    std::size_t workers = 1;
};

struct BootstrapResult {
    double low = 0.0;
    double high = 0.0;
    int valid = 0;
    int skipped = 0;
    std::vector<double> replicates;  // valid replicate values in replicate order
};

BootstrapResult bootstrap_ci(const ScoredTask& task, const MetricFn& metric, const BootstrapConfig& config = {});
// Every ordered resample (n^n of them) once; undefined resamples are dropped.
BootstrapResult bootstrap_ci_exhaustive(const ScoredTask& task, const MetricFn& metric, double alpha = 0.05);

// Linear-interpolation percentile, q in [0, 100].
double percentile(std::vector<double> values, double q);

struct PermutationConfig {
    int n_perm = 1000;
    std::uint64_t seed = 0;
    std::size_t workers = 1;
};

struct PermutationResult {
    double delta = 0.0;
    double p_value = 1.0;
    int n = 0;
};

PermutationResult paired_permutation_test(const ScoredTask& a, const ScoredTask& b, const MetricFn& metric,
                                          const PermutationConfig& config = {});
// All 2^n swap patterns; n <= 20.
PermutationResult paired_permutation_exact(const ScoredTask& a, const ScoredTask& b, const MetricFn& metric);

std::string significance_marker(double p);

// ---------------------------------------------------------------------------
// Reports

struct MetricValue {
    double value = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
};

struct TaskReport {
    std::string task_id;
    std::size_t n = 0;
    std::size_t positives = 0;
    double threshold = 0.0;
    std::map<std::string, MetricValue> metrics;
    int skipped_replicates = 0;
};

struct MetricReport {
    std::vector<TaskReport> tasks;
};

struct EvalConfig {
    BootstrapConfig bootstrap;
    bool with_ci = true;
};

// Thresholds come from `calibration` when given for that task, else from the task itself.
MetricReport evaluate(const std::vector<ScoredTask>& tasks, const std::vector<ScoredTask>* calibration,
                      const EvalConfig& config);

struct ComparisonRow {
    std::string task_id;
    std::string metric;
    double value_a = 0.0;
    double value_b = 0.0;
    double delta = 0.0;
    double p_value = 1.0;
};

std::vector<ComparisonRow> compare(const std::vector<ScoredTask>& a, const std::vector<ScoredTask>& b,
                                   const std::vector<std::string>& metrics, const PermutationConfig& config);

// CSV `record_id,task_id,score,label`; tasks in order of first appearance.
std::vector<ScoredTask> read_scores_csv(const std::filesystem::path& path);
std::string scores_csv(const std::vector<ScoredTask>& tasks);

std::string report_text(const MetricReport& report);
std::string report_csv(const MetricReport& report);
std::string comparison_text(const std::vector<ComparisonRow>& rows);
std::string comparison_csv(const std::vector<ComparisonRow>& rows);

}  // namespace ecgclip
