#include "ecgclip/evalsuite.hpp"

#include "ecgclip/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace ecgclip {

std::size_t ScoredTask::positives() const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
}

void ScoredTask::validate() const {
    if (static_cast<std::size_t>(scores.size()) != labels.size()) throw ShapeError("task " + task_id + ": scores and labels differ in length");
    if (!record_ids.empty() && record_ids.size() != labels.size()) throw ShapeError("task " + task_id + ": record ids misaligned");
    if (!groups.empty() && groups.size() != labels.size()) throw ShapeError("task " + task_id + ": groups misaligned");
    if (!scores.allFinite()) throw ShapeError("task " + task_id + ": non-finite score");
    for (int l : labels)
        if (l != 0 && l != 1) throw ShapeError("task " + task_id + ": labels must be 0 or 1");
}

ScoredTask ScoredTask::subset(const std::vector<std::size_t>& idx) const {
    ScoredTask t;
    t.task_id = task_id;
    t.scores.resize(static_cast<Eigen::Index>(idx.size()));
    t.labels.reserve(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
        t.scores[static_cast<Eigen::Index>(k)] = scores[static_cast<Eigen::Index>(idx[k])];
        t.labels.push_back(labels[idx[k]]);
        if (!record_ids.empty()) t.record_ids.push_back(record_ids[idx[k]]);
        if (!groups.empty()) t.groups.push_back(groups[idx[k]]);
    }
    return t;
}

namespace {

std::vector<std::size_t> order_desc(const ScoredTask& t) {
    std::vector<std::size_t> idx(t.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return t.scores[static_cast<Eigen::Index>(a)] > t.scores[static_cast<Eigen::Index>(b)];
    });
    return idx;
}

}  // namespace

double prauc(const ScoredTask& task) {
    const auto pos = static_cast<double>(task.positives());
    if (pos == 0) throw UndefinedMetric("PRAUC undefined for task " + task.task_id + ": no positive labels");
    const auto idx = order_desc(task);
    double ap = 0.0, prev_recall = 0.0;
    long tp = 0, fp = 0;
    for (std::size_t k = 0; k < idx.size();) {
        const double s = task.scores[static_cast<Eigen::Index>(idx[k])];
        while (k < idx.size() && task.scores[static_cast<Eigen::Index>(idx[k])] == s) {
            (task.labels[idx[k]] ? tp : fp)++;
            ++k;
        }
        const double recall = static_cast<double>(tp) / pos;
        const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    return ap;
}

double roauc(const ScoredTask& task) {
    const auto pos = static_cast<double>(task.positives());
    const double neg = static_cast<double>(task.size()) - pos;
    if (pos == 0 || neg == 0) throw UndefinedMetric("ROAUC undefined for task " + task.task_id + ": single-class labels");
    auto idx = order_desc(task);
    std::reverse(idx.begin(), idx.end());
    // Midranks (1-based) over ascending scores.
    double rank_sum = 0.0;
    for (std::size_t k = 0; k < idx.size();) {
        std::size_t j = k;
        const double s = task.scores[static_cast<Eigen::Index>(idx[k])];
        while (j < idx.size() && task.scores[static_cast<Eigen::Index>(idx[j])] == s) ++j;
        const double mid = 0.5 * static_cast<double>(k + 1 + j);
        for (std::size_t q = k; q < j; ++q)
            if (task.labels[idx[q]]) rank_sum += mid;
        k = j;
    }
    return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

Confusion confusion_at(const ScoredTask& task, double threshold) {
    Confusion c;
    for (std::size_t i = 0; i < task.size(); ++i) {
        const bool pred = task.scores[static_cast<Eigen::Index>(i)] >= threshold;
        if (task.labels[i]) (pred ? c.tp : c.fn)++;
        else (pred ? c.fp : c.tn)++;
    }
    return c;
}

ConfusionMetrics metrics_from_confusion(const Confusion& c) {
    const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp);
    const double fn = static_cast<double>(c.fn), tn = static_cast<double>(c.tn);
    ConfusionMetrics m;
    m.sensitivity = (tp + fn) > 0 ? tp / (tp + fn) : 0.0;
    m.specificity = (tn + fp) > 0 ? tn / (tn + fp) : 0.0;
    m.f1 = (tp + fp) > 0 && (tp + fn) > 0 ? 2.0 * tp / (2.0 * tp + fp + fn) : 0.0;
    const double den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
    m.mcc = den > 0 ? (tp * tn - fp * fn) / std::sqrt(den) : 0.0;
    return m;
}

ConfusionMetrics confusion_metrics(const ScoredTask& task, double threshold) {
    return metrics_from_confusion(confusion_at(task, threshold));
}

double calibrate_threshold(const ScoredTask& validation) {
    if (validation.positives() == 0)
        throw UndefinedMetric("cannot calibrate a threshold for task " + validation.task_id + ": no positive labels");
    std::set<double, std::greater<>> candidates(validation.scores.begin(), validation.scores.end());
    double best = -1.0, best_t = *candidates.begin();
    for (double t : candidates) {
        const double f1 = confusion_metrics(validation, t).f1;
        if (f1 > best) {
            best = f1;
            best_t = t;
        }
    }
    return best_t;
}

const std::vector<std::string>& metric_names() {
    static const std::vector<std::string> names = {"prauc", "roauc", "sensitivity", "specificity", "f1", "mcc"};
    return names;
}

MetricFn metric_by_name(const std::string& name, double threshold) {
    if (name == "prauc") return [](const ScoredTask& t) { return prauc(t); };
    if (name == "roauc") return [](const ScoredTask& t) { return roauc(t); };
    if (name == "sensitivity") return [threshold](const ScoredTask& t) { return confusion_metrics(t, threshold).sensitivity; };
    if (name == "specificity") return [threshold](const ScoredTask& t) { return confusion_metrics(t, threshold).specificity; };
    if (name == "f1") return [threshold](const ScoredTask& t) { return confusion_metrics(t, threshold).f1; };
    if (name == "mcc") return [threshold](const ScoredTask& t) { return confusion_metrics(t, threshold).mcc; };
    throw ConfigError("unknown metric '" + name + "'");
}

double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw UndefinedMetric("percentile of an empty sample");
    std::sort(values.begin(), values.end());
    const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

namespace {

std::vector<std::size_t> draw_resample(const ScoredTask& task, bool by_group, Rng& rng) {
    const std::size_t n = task.size();
    std::vector<std::size_t> idx;
    if (!by_group || task.groups.empty()) {
        std::uniform_int_distribution<std::size_t> pick(0, n - 1);
        idx.resize(n);
        for (auto& i : idx) i = pick(rng);
        return idx;
    }
    std::vector<std::string> order;
    std::map<std::string, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < n; ++i) {
        auto& m = members[task.groups[i]];
        if (m.empty()) order.push_back(task.groups[i]);
        m.push_back(i);
    }
    std::uniform_int_distribution<std::size_t> pick(0, order.size() - 1);
    for (std::size_t g = 0; g < order.size(); ++g) {
        const auto& m = members[order[pick(rng)]];
        idx.insert(idx.end(), m.begin(), m.end());
    }
    return idx;
}

}  // namespace

BootstrapResult bootstrap_ci(const ScoredTask& task, const MetricFn& metric, const BootstrapConfig& config) {
    task.validate();
    if (task.size() == 0) throw UndefinedMetric("bootstrap of an empty task");
    if (config.n_boot < 1) throw ConfigError("n_boot must be positive");
    metric(task);  // must be defined on the full sample

    const auto n_boot = static_cast<std::size_t>(config.n_boot);
    std::vector<double> values(n_boot, 0.0);
    std::vector<char> ok(n_boot, 0);
    parallel_for(n_boot, config.workers, [&](std::size_t r) {
        Rng rng = make_rng(config.seed, r);
        for (int attempt = 0; attempt <= config.max_retries; ++attempt) {
            try {
                values[r] = metric(task.subset(draw_resample(task, config.by_group, rng)));
                ok[r] = 1;
                return;
            } catch (const UndefinedMetric&) {
            }
        }
    });

    BootstrapResult res;
    for (std::size_t r = 0; r < n_boot; ++r) {
        if (ok[r]) res.replicates.push_back(values[r]);
        else ++res.skipped;
    }
    res.valid = static_cast<int>(res.replicates.size());
    if (res.valid < config.min_valid)
        throw UnstableCI("only " + std::to_string(res.valid) + " valid bootstrap replicates for task " + task.task_id);
    res.low = percentile(res.replicates, 100.0 * config.alpha / 2.0);
    res.high = percentile(res.replicates, 100.0 * (1.0 - config.alpha / 2.0));
    return res;
}

BootstrapResult bootstrap_ci_exhaustive(const ScoredTask& task, const MetricFn& metric, double alpha) {
    task.validate();
    const std::size_t n = task.size();
    if (n == 0 || n > 8) throw ConfigError("exhaustive bootstrap supports 1..8 records");
    std::size_t total = 1;
    for (std::size_t i = 0; i < n; ++i) total *= n;
    BootstrapResult res;
    std::vector<std::size_t> idx(n);
    for (std::size_t code = 0; code < total; ++code) {
        std::size_t c = code;
        for (std::size_t i = 0; i < n; ++i) {
            idx[i] = c % n;
            c /= n;
        }
        try {
            res.replicates.push_back(metric(task.subset(idx)));
        } catch (const UndefinedMetric&) {
            ++res.skipped;
        }
    }
    res.valid = static_cast<int>(res.replicates.size());
    if (res.valid == 0) throw UnstableCI("no defined resamples for task " + task.task_id);
    res.low = percentile(res.replicates, 100.0 * alpha / 2.0);
    res.high = percentile(res.replicates, 100.0 * (1.0 - alpha / 2.0));
    return res;
}

namespace {

void check_pair(const ScoredTask& a, const ScoredTask& b) {
    a.validate();
    b.validate();
    if (a.labels != b.labels) throw AlignmentError("task " + a.task_id + ": label vectors differ between runs");
    if (!a.record_ids.empty() && !b.record_ids.empty() && a.record_ids != b.record_ids)
        throw AlignmentError("task " + a.task_id + ": record order differs between runs");
}

double swapped_delta(const ScoredTask& a, const ScoredTask& b, const std::vector<char>& swap, const MetricFn& metric) {
    ScoredTask x = a, y = b;
    for (std::size_t i = 0; i < swap.size(); ++i)
        if (swap[i]) std::swap(x.scores[static_cast<Eigen::Index>(i)], y.scores[static_cast<Eigen::Index>(i)]);
    return metric(x) - metric(y);
}

bool at_least_as_extreme(double d, double obs) {
    return std::abs(d) >= std::abs(obs) - 1e-12 * std::max(1.0, std::abs(obs));
}

}  // namespace

PermutationResult paired_permutation_test(const ScoredTask& a, const ScoredTask& b, const MetricFn& metric,
                                          const PermutationConfig& config) {
    check_pair(a, b);
    if (config.n_perm < 1) throw ConfigError("n_perm must be positive");
    PermutationResult res;
    res.delta = metric(a) - metric(b);
    res.n = config.n_perm;
    const auto n_perm = static_cast<std::size_t>(config.n_perm);
    std::vector<char> hit(n_perm, 0);
    parallel_for(n_perm, config.workers, [&](std::size_t p) {
        Rng rng = make_rng(config.seed, p);
        std::bernoulli_distribution coin(0.5);
        std::vector<char> swap(a.size());
        for (auto& s : swap) s = coin(rng) ? 1 : 0;
        hit[p] = at_least_as_extreme(swapped_delta(a, b, swap, metric), res.delta) ? 1 : 0;
    });
    res.p_value = static_cast<double>(std::count(hit.begin(), hit.end(), 1)) / static_cast<double>(n_perm);
    return res;
}

PermutationResult paired_permutation_exact(const ScoredTask& a, const ScoredTask& b, const MetricFn& metric) {
    check_pair(a, b);
    const std::size_t n = a.size();
    if (n > 20) throw ConfigError("exact permutation test supports at most 20 records");
    PermutationResult res;
    res.delta = metric(a) - metric(b);
    const std::size_t total = std::size_t{1} << n;
    res.n = static_cast<int>(total);
    std::size_t hits = 0;
    std::vector<char> swap(n);
    for (std::size_t code = 0; code < total; ++code) {
        for (std::size_t i = 0; i < n; ++i) swap[i] = (code >> i) & 1u ? 1 : 0;
        if (at_least_as_extreme(swapped_delta(a, b, swap, metric), res.delta)) ++hits;
    }
    res.p_value = static_cast<double>(hits) / static_cast<double>(total);
    return res;
}

std::string significance_marker(double p) {
    if (p < 0.001) return "***";
    if (p < 0.01) return "**";
    if (p < 0.05) return "*";
    return "ns";
}

// ---------------------------------------------------------------------------

MetricReport evaluate(const std::vector<ScoredTask>& tasks, const std::vector<ScoredTask>* calibration,
                      const EvalConfig& config) {
    MetricReport report;
    for (const auto& task : tasks) {
        task.validate();
        if (task.positives() == 0) throw UndefinedMetric("task " + task.task_id + " has no positive labels");
        if (task.positives() == task.size()) throw UndefinedMetric("task " + task.task_id + " has no negative labels");
        TaskReport tr;
        tr.task_id = task.task_id;
        tr.n = task.size();
        tr.positives = task.positives();
        const ScoredTask* calib = &task;
        if (calibration) {
            auto it = std::find_if(calibration->begin(), calibration->end(),
                                   [&](const ScoredTask& c) { return c.task_id == task.task_id; });
            if (it != calibration->end()) calib = &*it;
        }
        tr.threshold = calibrate_threshold(*calib);
        for (const auto& name : metric_names()) {
            const auto fn = metric_by_name(name, tr.threshold);
            MetricValue mv;
            mv.value = fn(task);
            mv.ci_low = mv.ci_high = mv.value;
            if (config.with_ci) {
                const auto ci = bootstrap_ci(task, fn, config.bootstrap);
                mv.ci_low = ci.low;
                mv.ci_high = ci.high;
                tr.skipped_replicates = std::max(tr.skipped_replicates, ci.skipped);
            }
            tr.metrics[name] = mv;
        }
        report.tasks.push_back(std::move(tr));
    }
    return report;
}

std::vector<ComparisonRow> compare(const std::vector<ScoredTask>& a, const std::vector<ScoredTask>& b,
                                   const std::vector<std::string>& metrics, const PermutationConfig& config) {
    std::vector<ComparisonRow> rows;
    for (const auto& ta : a) {
        auto it = std::find_if(b.begin(), b.end(), [&](const ScoredTask& t) { return t.task_id == ta.task_id; });
        if (it == b.end()) throw AlignmentError("task " + ta.task_id + " missing from the second run");
        // Align the second run to the first by record id.
        ScoredTask tb = *it;
        if (!ta.record_ids.empty() && !tb.record_ids.empty() && ta.record_ids != tb.record_ids) {
            std::map<std::string, std::size_t> pos;
            for (std::size_t i = 0; i < tb.record_ids.size(); ++i) pos[tb.record_ids[i]] = i;
            std::vector<std::size_t> idx;
            for (const auto& r : ta.record_ids) {
                auto p = pos.find(r);
                if (p == pos.end()) throw AlignmentError("record " + r + " missing from the second run");
                idx.push_back(p->second);
            }
            if (idx.size() != tb.record_ids.size()) throw AlignmentError("task " + ta.task_id + ": record sets differ");
            tb = tb.subset(idx);
        }
        for (const auto& m : metrics) {
            double threshold = 0.5;
            if (m != "prauc" && m != "roauc") threshold = calibrate_threshold(ta);
            const auto res = paired_permutation_test(ta, tb, metric_by_name(m, threshold), config);
            ComparisonRow row;
            row.task_id = ta.task_id;
            row.metric = m;
            row.value_a = metric_by_name(m, threshold)(ta);
            row.value_b = metric_by_name(m, threshold)(tb);
            row.delta = res.delta;
            row.p_value = res.p_value;
            rows.push_back(row);
        }
    }
    return rows;
}

std::vector<ScoredTask> read_scores_csv(const std::filesystem::path& path) {
    const auto rows = read_csv_table(path, {"record_id", "task_id", "score", "label"});
    std::vector<ScoredTask> tasks;
    std::map<std::string, std::size_t> where;
    std::map<std::string, std::vector<double>> scores;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto& row = rows[r];
        const std::string line = path.string() + " row " + std::to_string(r + 2);
        double score = 0.0;
        int label = 0;
        try {
            std::size_t used = 0;
            score = std::stod(row[2], &used);
            if (used != row[2].size()) throw std::invalid_argument("trailing");
            label = std::stoi(row[3], &used);
            if (used != row[3].size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw ValidationError(line + ": malformed score or label");
        }
        if (!std::isfinite(score)) throw ValidationError(line + ": non-finite score");
        if (label != 0 && label != 1) throw ValidationError(line + ": label must be 0 or 1");
        auto [it, inserted] = where.emplace(row[1], tasks.size());
        if (inserted) {
            tasks.emplace_back();
            tasks.back().task_id = row[1];
        }
        auto& t = tasks[it->second];
        t.record_ids.push_back(row[0]);
        t.labels.push_back(label);
        scores[row[1]].push_back(score);
    }
    for (auto& t : tasks) t.scores = Eigen::Map<const Eigen::VectorXd>(scores[t.task_id].data(), static_cast<Eigen::Index>(scores[t.task_id].size()));
    return tasks;
}

std::string scores_csv(const std::vector<ScoredTask>& tasks) {
    std::string out = "record_id,task_id,score,label\n";
    for (const auto& t : tasks)
        for (std::size_t i = 0; i < t.size(); ++i)
            out += csv_line({t.record_ids.empty() ? std::to_string(i) : t.record_ids[i], t.task_id,
                             format_double(t.scores[static_cast<Eigen::Index>(i)]), std::to_string(t.labels[i])});
    return out;
}

namespace {

std::string fmt(double v) { return format_double(v, 6); }

}  // namespace

std::string report_text(const MetricReport& report) {
    std::string out;
    for (const auto& t : report.tasks) {
        out += "[task " + t.task_id + "]\n";
        out += "n=" + std::to_string(t.n) + "\n";
        out += "positives=" + std::to_string(t.positives) + "\n";
        out += "threshold=" + fmt(t.threshold) + "\n";
        for (const auto& name : metric_names()) {
            const auto& m = t.metrics.at(name);
            out += name + "=" + fmt(m.value) + "\n";
            out += name + "_ci_low=" + fmt(m.ci_low) + "\n";
            out += name + "_ci_high=" + fmt(m.ci_high) + "\n";
        }
        if (t.skipped_replicates > 0) out += "skipped_replicates=" + std::to_string(t.skipped_replicates) + "\n";
        out += "\n";
    }
    return out;
}

std::string report_csv(const MetricReport& report) {
    std::string out = "task_id,metric,value,ci_low,ci_high,threshold\n";
    for (const auto& t : report.tasks)
        for (const auto& name : metric_names()) {
            const auto& m = t.metrics.at(name);
            out += csv_line({t.task_id, name, fmt(m.value), fmt(m.ci_low), fmt(m.ci_high), fmt(t.threshold)});
        }
    return out;
}

std::string comparison_text(const std::vector<ComparisonRow>& rows) {
    std::string out;
    std::string current;
    for (const auto& r : rows) {
        if (r.task_id != current) {
            if (!current.empty()) out += "\n";
            out += "[task " + r.task_id + "]\n";
            current = r.task_id;
        }
        out += r.metric + "_a=" + fmt(r.value_a) + "\n";
        out += r.metric + "_b=" + fmt(r.value_b) + "\n";
        out += r.metric + "_delta=" + fmt(r.delta) + "\n";
        out += r.metric + "_p_value=" + fmt(r.p_value) + " " + significance_marker(r.p_value) + "\n";
    }
    return out;
}

std::string comparison_csv(const std::vector<ComparisonRow>& rows) {
    std::string out = "task_id,metric,value_a,value_b,delta,p_value,significance\n";
    for (const auto& r : rows)
        out += csv_line({r.task_id, r.metric, fmt(r.value_a), fmt(r.value_b), fmt(r.delta), fmt(r.p_value),
                         significance_marker(r.p_value)});
    return out;
}

}  // namespace ecgclip
