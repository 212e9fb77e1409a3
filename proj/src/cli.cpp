#include "ecgclip/cli.hpp"

#include "ecgclip/attribution.hpp"
#include "ecgclip/ecg_io.hpp"
#include "ecgclip/embedder.hpp"
#include "ecgclip/errors.hpp"
#include "ecgclip/evalsuite.hpp"
#include "ecgclip/ontology.hpp"
#include "ecgclip/signal.hpp"
#include "ecgclip/trainer.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <ostream>
#include <unistd.h>

namespace fs = std::filesystem;

namespace ecgclip {

namespace {

// Content hash of a file, or of every regular file under a directory (sorted by path).
std::string content_hash(const fs::path& p) {
    if (fs::is_regular_file(p)) return hex64(fnv1a64(read_file(p)));
    if (!fs::is_directory(p)) throw IoError("input " + p.string() + " does not exist");
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(p))
        if (e.is_regular_file() && e.path().filename() != "manifest.ini") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::uint64_t h = fnv1a64(std::string_view{});
    for (const auto& f : files) {
        h = fnv1a64(fs::relative(f, p).generic_string(), h);
        h = fnv1a64(read_file(f), h);
    }
    return hex64(h);
}

struct Manifest {
    std::string command;
    std::vector<std::pair<std::string, std::string>> inputs;
    std::map<std::string, std::string> run;

    void input(const std::string& path) { inputs.emplace_back(path, content_hash(path)); }

    // Re-runnable CLI11 config for the subcommand, with hashes and run facts as comments.
    std::string render(const CLI::App& app) const {
        std::string out = "# ecgclip " + command + " manifest\n";
        for (const auto& [p, h] : inputs) out += "# input " + p + " fnv1a64=" + h + "\n";
        for (const auto& [k, v] : run) out += "# run." + k + "=" + v + "\n";
        const std::string prefix = command + ".";
        for (const auto& line : split(app.config_to_str(true, false), '\n')) {
            // Options left unset render as key="".
            if (line.empty() || line.ends_with("=\"\"")) continue;
            if (line.rfind(prefix, 0) == 0 || line.find('.') == std::string::npos || line.find('.') > line.find('='))
                out += line + "\n";
        }
        return out;
    }
};

// Builds a directory next to `target` and renames it into place.
template <typename Fn>
void write_dir_atomic(const fs::path& target, Fn&& fill) {
    const fs::path tmp = target.string() + ".tmp" + std::to_string(::getpid());
    fs::remove_all(tmp);
    fs::create_directories(tmp);
    try {
        fill(tmp);
    } catch (...) {
        fs::remove_all(tmp);
        throw;
    }
    if (fs::exists(target)) fs::remove_all(target);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    fs::rename(tmp, target);
}

fs::path sibling_manifest(const fs::path& file) { return file.string() + ".manifest.ini"; }

std::vector<std::pair<std::string, double>> parse_prevalences(const std::string& text) {
    std::vector<std::pair<std::string, double>> out;
    for (const auto& item : split(text, ',')) {
        auto kv = split(item, ':');
        if (kv.size() != 2 || trim(kv[0]).empty()) throw ConfigError("malformed label prevalence '" + item + "'");
        double p = 0.0;
        try {
            p = std::stod(kv[1]);
        } catch (const std::exception&) {
            throw ConfigError("malformed label prevalence '" + item + "'");
        }
        out.emplace_back(trim(kv[0]), p);
    }
    return out;
}

std::vector<std::string> parse_list(const std::string& text) {
    std::vector<std::string> out;
    for (const auto& s : split(text, ','))
        if (!trim(s).empty()) out.push_back(trim(s));
    return out;
}

void ensure_dir(const fs::path& dir) {
    if (!dir.empty()) fs::create_directories(dir);
}

IgRule parse_rule(const std::string& s) {
    if (s == "endpoint") return IgRule::endpoint;
    if (s == "midpoint") return IgRule::midpoint;
    throw ConfigError("unknown integration rule '" + s + "'");
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"ecgclip: ECG signal-report contrastive pretraining and evaluation toolkit"};
    app.name("ecgclip");
    app.require_subcommand(1);
    app.set_config("--config", "", "Read options from a config file (flags given on the command line win)");
    app.allow_config_extras(CLI::config_extras_mode::error);
    std::size_t workers = default_workers();
    app.add_option("--workers", workers, "Worker threads (default from ECGCLIP_WORKERS)")->check(CLI::PositiveNumber);

    std::function<void()> action;
    Manifest manifest;

    // synth -----------------------------------------------------------------
    struct {
        std::string out, labels = "AF:0.5,LBBB:0.3";
        int patients = 128, records_per_patient = 1, descriptors = 6;
        std::uint64_t seed = 0;
        double fs = 500.0, duration = 10.0, noise = 0.02;
    } synth;
    auto* c_synth = app.add_subcommand("synth", "Generate a synthetic cohort directory");
    c_synth->add_option("--out", synth.out, "Output cohort directory")->required();
    c_synth->add_option("--patients", synth.patients)->capture_default_str();
    c_synth->add_option("--records-per-patient", synth.records_per_patient)->capture_default_str();
    c_synth->add_option("--labels", synth.labels, "label:prevalence pairs")->capture_default_str();
    c_synth->add_option("--descriptors", synth.descriptors, "Incidental report findings (0-8)")->capture_default_str();
    c_synth->add_option("--fs", synth.fs)->capture_default_str();
    c_synth->add_option("--duration", synth.duration, "Seconds per record")->capture_default_str();
    c_synth->add_option("--noise", synth.noise, "White noise level in mV")->capture_default_str();
    c_synth->add_option("--seed", synth.seed)->capture_default_str();
    c_synth->callback([&] {
        action = [&] {
            CohortSpec spec;
            spec.n_patients = synth.patients;
            spec.records_per_patient = synth.records_per_patient;
            spec.label_prevalences = parse_prevalences(synth.labels);
            spec.seed = synth.seed;
            spec.fs = synth.fs;
            spec.duration_s = synth.duration;
            spec.noise_mv = synth.noise;
            spec.n_descriptors = synth.descriptors;
            const auto cohort = generate_synthetic_cohort(spec);
            manifest.run["records"] = std::to_string(cohort.records.size());
            write_dir_atomic(synth.out, [&](const fs::path& dir) {
                write_cohort(cohort, dir);
                write_file_atomic(dir / "manifest.ini", manifest.render(app));
            });
            out << "wrote " << cohort.records.size() << " records to " << synth.out << "\n";
        };
    });

    // split -----------------------------------------------------------------
    struct {
        std::string cohort, out, ratios = "train:0.7,val:0.15,test:0.15", stratify;
        std::uint64_t seed = 0;
    } sp;
    auto* c_split = app.add_subcommand("split", "Patient-level stratified split");
    c_split->add_option("--cohort", sp.cohort)->required();
    c_split->add_option("--out", sp.out, "Split CSV (patient_id,split)")->required();
    c_split->add_option("--ratios", sp.ratios, "name:fraction pairs")->capture_default_str();
    c_split->add_option("--stratify", sp.stratify, "Comma-separated labels (default: whole label space)")->capture_default_str();
    c_split->add_option("--seed", sp.seed)->capture_default_str();
    c_split->callback([&] {
        action = [&] {
            manifest.input(sp.cohort);
            const auto cohort = read_cohort(sp.cohort);
            auto strat = parse_list(sp.stratify);
            std::set<std::string> on(strat.begin(), strat.end());
            if (on.empty()) on.insert(cohort.label_space.begin(), cohort.label_space.end());
            const auto plan = make_splits(cohort, parse_ratios(sp.ratios), on, sp.seed);
            ensure_dir(fs::path(sp.out).parent_path());
            write_split_csv(plan, sp.out);
            write_file_atomic(sibling_manifest(sp.out), manifest.render(app));
            for (const auto& [name, frac] : plan.ratios)
                out << name << ": " << plan.patients_in(name).size() << " patients\n";
        };
    });

    // preprocess ------------------------------------------------------------
    struct {
        std::string cohort, out;
    } pp;
    auto* c_pre = app.add_subcommand("preprocess", "Filter, resample and window every record to 8x5000 at 500 Hz");
    c_pre->add_option("--cohort", pp.cohort)->required();
    c_pre->add_option("--out", pp.out, "Output cohort directory")->required();
    c_pre->callback([&] {
        action = [&] {
            manifest.input(pp.cohort);
            const auto cohort = read_cohort(pp.cohort);
            std::vector<std::size_t> all(cohort.records.size());
            std::iota(all.begin(), all.end(), 0);
            const auto tensors = prepare_tensors(cohort, all, workers);
            Cohort result;
            result.label_space = cohort.label_space;
            result.reports = cohort.reports;
            for (std::size_t i = 0; i < all.size(); ++i) {
                auto rec = tensors[i].to_record(cohort.records[i].patient_id, cohort.records[i].record_id);
                rec.labels = cohort.records[i].labels;
                result.records.push_back(std::move(rec));
            }
            write_dir_atomic(pp.out, [&](const fs::path& dir) {
                write_cohort(result, dir);
                write_file_atomic(dir / "manifest.ini", manifest.render(app));
            });
            out << "preprocessed " << result.records.size() << " records into " << pp.out << "\n";
        };
    });

    // pretrain --------------------------------------------------------------
    PretrainConfig pcfg;
    struct {
        std::string cohort, splits, out;
    } pt;
    auto* c_pt = app.add_subcommand("pretrain", "Contrastive pretraining (cross-modal + uni-modal alignment)");
    c_pt->add_option("--cohort", pt.cohort)->required();
    c_pt->add_option("--splits", pt.splits)->required();
    c_pt->add_option("--out", pt.out, "Output directory")->required();
    c_pt->add_option("--train-split", pcfg.train_split)->capture_default_str();
    c_pt->add_option("--val-split", pcfg.val_split)->capture_default_str();
    c_pt->add_option("--tau", pcfg.tau, "Temperature")->capture_default_str();
    c_pt->add_option("--dropout", pcfg.dropout, "Dropout rate for the two views")->capture_default_str();
    c_pt->add_option("--cma-weight", pcfg.weights.cma)->capture_default_str();
    c_pt->add_option("--uma-weight", pcfg.weights.uma)->capture_default_str();
    c_pt->add_option("--batch-size", pcfg.batch_size)->capture_default_str();
    c_pt->add_option("--epochs", pcfg.epochs)->capture_default_str();
    c_pt->add_option("--max-steps", pcfg.max_steps, "Stop after this many steps (0: no limit)")->capture_default_str();
    c_pt->add_option("--lr", pcfg.schedule.peak, "Peak learning rate")->capture_default_str();
    c_pt->add_option("--t0", pcfg.schedule.t0, "Warm restart period")->capture_default_str();
    c_pt->add_option("--t-mult", pcfg.schedule.t_mult)->capture_default_str();
    c_pt->add_option("--eta-min", pcfg.schedule.eta_min)->capture_default_str();
    c_pt->add_option("--weight-decay", pcfg.adamw.weight_decay)->capture_default_str();
    c_pt->add_option("--seed", pcfg.seed)->capture_default_str();
    c_pt->callback([&] {
        action = [&] {
            manifest.input(pt.cohort);
            manifest.input(pt.splits);
            pcfg.workers = workers;
            const auto cohort = read_cohort(pt.cohort);
            const auto plan = read_split_csv(pt.splits);
            const auto res = pretrain(cohort, plan, pcfg);
            for (const auto& [k, v] : res.manifest) manifest.run[k] = v;
            const fs::path dir = pt.out;
            ensure_dir(dir);
            write_checkpoint(res.best, dir / "encoder.ckpt");
            write_file_atomic(dir / "metrics.csv", metrics_csv(res.trajectory));
            write_file_atomic(dir / "manifest.ini", manifest.render(app));
            out << "selected iteration " << res.best_iteration << " with validation recall@1 " << res.best_score
                << " (untrained " << res.initial_score << ")\n";
        };
    });

    // finetune --------------------------------------------------------------
    FinetuneConfig fcfg;
    struct {
        std::string checkpoint, cohort, splits, out, tasks, eval_splits = "val,test";
    } ft;
    auto* c_ft = app.add_subcommand("finetune", "Train per-task sigmoid heads and score evaluation splits");
    c_ft->add_option("--checkpoint", ft.checkpoint, "Pretrained encoder checkpoint")->required();
    c_ft->add_option("--cohort", ft.cohort)->required();
    c_ft->add_option("--splits", ft.splits)->required();
    c_ft->add_option("--out", ft.out, "Output directory")->required();
    c_ft->add_option("--tasks", ft.tasks, "Comma-separated tasks (default: label space)")->capture_default_str();
    c_ft->add_option("--train-split", fcfg.train_split)->capture_default_str();
    c_ft->add_option("--val-split", fcfg.val_split)->capture_default_str();
    c_ft->add_option("--eval-splits", ft.eval_splits, "Splits to write scores_<split>.csv for")->capture_default_str();
    c_ft->add_flag("--full-finetune", fcfg.full_finetune, "Train the encoder too (default: linear probe)");
    c_ft->add_option("--batch-size", fcfg.batch_size)->capture_default_str();
    c_ft->add_option("--iterations", fcfg.iterations)->capture_default_str();
    c_ft->add_option("--eval-interval", fcfg.eval_interval)->capture_default_str();
    c_ft->add_option("--lr", fcfg.schedule.peak, "Peak learning rate")->capture_default_str();
    c_ft->add_option("--warmup", fcfg.schedule.warmup_iters, "Warmup iterations")->capture_default_str();
    c_ft->add_option("--warmup-start", fcfg.schedule.warmup_start)->capture_default_str();
    c_ft->add_option("--weight-decay", fcfg.adamw.weight_decay)->capture_default_str();
    c_ft->add_option("--seed", fcfg.seed)->capture_default_str();
    c_ft->callback([&] {
        action = [&] {
            manifest.input(ft.checkpoint);
            manifest.input(ft.cohort);
            manifest.input(ft.splits);
            fcfg.workers = workers;
            const auto encoder = read_checkpoint(ft.checkpoint);
            const auto cohort = read_cohort(ft.cohort);
            const auto plan = read_split_csv(ft.splits);
            fcfg.tasks = parse_list(ft.tasks);
            if (fcfg.tasks.empty()) fcfg.tasks = cohort.label_space;
            const auto res = finetune(encoder, cohort, plan, fcfg);
            for (const auto& w : res.warnings) err << "warning: " << w << "\n";
            for (const auto& [k, v] : res.manifest) manifest.run[k] = v;
            const fs::path dir = ft.out;
            ensure_dir(dir);
            write_checkpoint(res.best, dir / "classifier.ckpt");
            write_file_atomic(dir / "metrics.csv", metrics_csv(res.trajectory));
            for (const auto& s : parse_list(ft.eval_splits)) {
                const auto data = labelled_split(cohort, plan, s, workers);
                if (data.x.empty()) throw ConfigError("split '" + s + "' has no records");
                write_file_atomic(dir / ("scores_" + s + ".csv"), scores_csv(predict(res.best, data, workers)));
            }
            write_file_atomic(dir / "manifest.ini", manifest.render(app));
            out << "selected iteration " << res.best_iteration << " with validation macro-PRAUC " << res.best_score << "\n";
        };
    });

    // eval ------------------------------------------------------------------
    struct {
        std::string scores, calibration, out, cohort;
        int n_boot = 1000;
        std::uint64_t seed = 0;
        bool by_patient = false, no_ci = false;
    } ev;
    auto* c_ev = app.add_subcommand("eval", "Metrics with F1-calibrated thresholds and bootstrap CIs");
    c_ev->add_option("--scores", ev.scores, "CSV record_id,task_id,score,label")->required();
    c_ev->add_option("--calibration", ev.calibration, "Validation scores for threshold calibration")->capture_default_str();
    c_ev->add_option("--out", ev.out, "Output directory")->required();
    c_ev->add_option("--n-boot", ev.n_boot)->capture_default_str();
    c_ev->add_option("--seed", ev.seed)->capture_default_str();
    c_ev->add_flag("--by-patient", ev.by_patient, "Resample patients instead of records (needs --cohort)");
    c_ev->add_option("--cohort", ev.cohort, "Cohort used to map records to patients")->capture_default_str();
    c_ev->add_flag("--no-ci", ev.no_ci, "Skip bootstrap intervals");
    c_ev->callback([&] {
        action = [&] {
            manifest.input(ev.scores);
            auto tasks = read_scores_csv(ev.scores);
            std::vector<ScoredTask> calib;
            if (!ev.calibration.empty()) {
                manifest.input(ev.calibration);
                calib = read_scores_csv(ev.calibration);
            }
            if (ev.by_patient) {
                if (ev.cohort.empty()) throw ConfigError("--by-patient needs --cohort");
                manifest.input(ev.cohort);
                const auto cohort = read_cohort(ev.cohort);
                for (auto& t : tasks) {
                    t.groups.clear();
                    for (const auto& rid : t.record_ids) {
                        const auto* rec = cohort.find(rid);
                        if (!rec) throw AlignmentError("record " + rid + " not in cohort");
                        t.groups.push_back(rec->patient_id);
                    }
                }
            }
            EvalConfig cfg;
            cfg.with_ci = !ev.no_ci;
            cfg.bootstrap.n_boot = ev.n_boot;
            cfg.bootstrap.seed = ev.seed;
            cfg.bootstrap.by_group = ev.by_patient;
            cfg.bootstrap.workers = workers;
            const auto report = evaluate(tasks, ev.calibration.empty() ? nullptr : &calib, cfg);
            const fs::path dir = ev.out;
            ensure_dir(dir);
            write_file_atomic(dir / "report.txt", report_text(report));
            write_file_atomic(dir / "report.csv", report_csv(report));
            write_file_atomic(dir / "manifest.ini", manifest.render(app));
            out << report_text(report);
        };
    });

    // compare ---------------------------------------------------------------
    struct {
        std::string a, b, out, metrics = "prauc,roauc";
        int n_perm = 1000;
        std::uint64_t seed = 0;
    } cmp;
    auto* c_cmp = app.add_subcommand("compare", "Paired permutation test between two score files");
    c_cmp->add_option("--a", cmp.a, "First scores CSV")->required();
    c_cmp->add_option("--b", cmp.b, "Second scores CSV")->required();
    c_cmp->add_option("--out", cmp.out, "Output directory")->required();
    c_cmp->add_option("--metrics", cmp.metrics)->capture_default_str();
    c_cmp->add_option("--n-perm", cmp.n_perm)->capture_default_str();
    c_cmp->add_option("--seed", cmp.seed)->capture_default_str();
    c_cmp->callback([&] {
        action = [&] {
            manifest.input(cmp.a);
            manifest.input(cmp.b);
            PermutationConfig cfg;
            cfg.n_perm = cmp.n_perm;
            cfg.seed = cmp.seed;
            cfg.workers = workers;
            const auto rows = compare(read_scores_csv(cmp.a), read_scores_csv(cmp.b), parse_list(cmp.metrics), cfg);
            const fs::path dir = cmp.out;
            ensure_dir(dir);
            write_file_atomic(dir / "comparison.txt", comparison_text(rows));
            write_file_atomic(dir / "comparison.csv", comparison_csv(rows));
            write_file_atomic(dir / "manifest.ini", manifest.render(app));
            out << comparison_text(rows);
        };
    });

    // attribute -------------------------------------------------------------
    struct {
        std::string checkpoint, cohort, record, task, out, rule = "midpoint";
        int steps = 128;
        bool positive = false;
    } at;
    auto* c_at = app.add_subcommand("attribute", "Integrated Gradients for one record and task");
    c_at->add_option("--checkpoint", at.checkpoint, "Classifier checkpoint")->required();
    c_at->add_option("--cohort", at.cohort)->required();
    c_at->add_option("--record", at.record)->required();
    c_at->add_option("--task", at.task)->required();
    c_at->add_option("--out", at.out, "Attribution CSV")->required();
    c_at->add_option("--steps", at.steps)->capture_default_str();
    c_at->add_option("--rule", at.rule, "endpoint or midpoint")->capture_default_str();
    c_at->add_flag("--positive-only", at.positive, "Zero out negative attributions");
    c_at->callback([&] {
        action = [&] {
            manifest.input(at.checkpoint);
            manifest.input(at.cohort);
            const auto ckpt = read_checkpoint(at.checkpoint);
            const auto tasks = head_tasks(ckpt);
            auto it = std::find(tasks.begin(), tasks.end(), at.task);
            if (it == tasks.end()) throw ConfigError("task " + at.task + " is not in the checkpoint head");
            const auto cohort = read_cohort(at.cohort);
            const auto* rec = cohort.find(at.record);
            if (!rec) throw ConfigError("record " + at.record + " not found");
            const SignalTensor x = is_tensor_record(*rec) ? SignalTensor::from_record(*rec) : preprocess(*rec);
            IgConfig cfg;
            cfg.steps = at.steps;
            cfg.rule = parse_rule(at.rule);
            cfg.workers = workers;
            auto attr = attribute(ckpt.params, it - tasks.begin(), at.task, x, cfg);
            if (at.positive) attr = positive_mask(attr);
            manifest.run["probability"] = format_double(attr.probability);
            ensure_dir(fs::path(at.out).parent_path());
            write_file_atomic(at.out, attribution_csv(attr, x));
            write_file_atomic(sibling_manifest(at.out), manifest.render(app));
            out << "task " << at.task << " probability " << attr.probability << "\n";
        };
    });

    // tsne ------------------------------------------------------------------
    TsneConfig tcfg;
    struct {
        std::string checkpoint, cohort, splits, split, out;
        int min_count = 1;
    } ts;
    auto* c_ts = app.add_subcommand("tsne", "Exact t-SNE of encoder embeddings");
    c_ts->add_option("--checkpoint", ts.checkpoint)->required();
    c_ts->add_option("--cohort", ts.cohort)->required();
    c_ts->add_option("--splits", ts.splits, "Split CSV (with --split)")->capture_default_str();
    c_ts->add_option("--split", ts.split, "Only records of this split")->capture_default_str();
    c_ts->add_option("--out", ts.out, "Layout CSV")->required();
    c_ts->add_option("--perplexity", tcfg.perplexity)->capture_default_str();
    c_ts->add_option("--iterations", tcfg.iterations)->capture_default_str();
    c_ts->add_option("--min-count", ts.min_count, "Drop label classes with fewer records")->capture_default_str();
    c_ts->add_option("--seed", tcfg.seed)->capture_default_str();
    c_ts->callback([&] {
        action = [&] {
            manifest.input(ts.checkpoint);
            manifest.input(ts.cohort);
            const auto ckpt = read_checkpoint(ts.checkpoint);
            const auto cohort = read_cohort(ts.cohort);
            std::vector<std::size_t> idx;
            if (!ts.split.empty()) {
                if (ts.splits.empty()) throw ConfigError("--split needs --splits");
                manifest.input(ts.splits);
                idx = read_split_csv(ts.splits).record_indices(cohort, ts.split);
            } else {
                idx.resize(cohort.records.size());
                std::iota(idx.begin(), idx.end(), 0);
            }
            auto class_of = [&](std::size_t i) {
                const auto& l = cohort.records[i].labels;
                if (l.empty()) return std::string("none");
                std::string s;
                for (const auto& x : l) s += (s.empty() ? "" : "+") + x;
                return s;
            };
            std::map<std::string, int> counts;
            for (auto i : idx) ++counts[class_of(i)];
            std::vector<std::size_t> keep;
            for (auto i : idx)
                if (counts[class_of(i)] >= ts.min_count) keep.push_back(i);
            const auto tensors = prepare_tensors(cohort, keep, workers);
            std::vector<Eigen::VectorXd> emb(keep.size());
            parallel_for(keep.size(), workers, [&](std::size_t k) { emb[k] = encode_signal(ckpt.params, tensors[k]).values; });
            if (emb.empty()) throw ConfigError("no records left for t-SNE");
            Eigen::MatrixXd x(static_cast<Eigen::Index>(emb.size()), emb[0].size());
            std::vector<std::string> ids, labels;
            for (std::size_t k = 0; k < keep.size(); ++k) {
                x.row(static_cast<Eigen::Index>(k)) = emb[k].transpose();
                ids.push_back(cohort.records[keep[k]].record_id);
                labels.push_back(class_of(keep[k]));
            }
            const auto layout = tsne(x, tcfg);
            for (const auto& w : layout.warnings) err << "warning: " << w << "\n";
            manifest.run["perplexity_used"] = format_double(layout.perplexity);
            manifest.run["final_kl"] = format_double(layout.kl);
            ensure_dir(fs::path(ts.out).parent_path());
            write_file_atomic(ts.out, layout_csv(layout, ids, labels));
            write_file_atomic(sibling_manifest(ts.out), manifest.render(app));
            out << "t-SNE of " << ids.size() << " records, final KL " << layout.kl << "\n";
        };
    });

    // map-labels ------------------------------------------------------------
    struct {
        std::string rules, reports, fields, out, prevalence;
    } ml;
    auto* c_ml = app.add_subcommand("map-labels", "Map reports and structured fields onto task labels");
    c_ml->add_option("--rules", ml.rules, "Ruleset file")->required();
    c_ml->add_option("--reports", ml.reports, "CSV record_id,report")->required();
    c_ml->add_option("--fields", ml.fields, "CSV record_id,field,value")->capture_default_str();
    c_ml->add_option("--out", ml.out, "Labels CSV record_id,label_id")->required();
    c_ml->add_option("--prevalence", ml.prevalence, "Prevalence table CSV")->capture_default_str();
    c_ml->callback([&] {
        action = [&] {
            manifest.input(ml.rules);
            manifest.input(ml.reports);
            const auto ruleset = read_ruleset(ml.rules);
            const auto matcher = compile_ruleset(ruleset);
            std::map<std::string, std::map<std::string, std::string>> fields;
            if (!ml.fields.empty()) {
                manifest.input(ml.fields);
                for (const auto& row : read_csv_table(ml.fields, {"record_id", "field", "value"})) fields[row[0]][row[1]] = row[2];
            }
            std::map<std::string, std::set<std::string>> labels;
            std::vector<std::string> order;
            for (const auto& row : read_csv_table(ml.reports, {"record_id", "report"})) {
                const auto res = map_record(matcher, row[1], fields[row[0]]);
                for (const auto& w : res.warnings) err << "warning: record " << row[0] << ": " << w << "\n";
                labels[row[0]] = res.labels;
            }
            for (const auto& r : ruleset.rules)
                if (std::find(order.begin(), order.end(), r.target) == order.end()) order.push_back(r.target);
            ensure_dir(fs::path(ml.out).parent_path());
            write_labels_csv(labels, ml.out);
            const auto table = prevalence_table(labels, order, static_cast<long>(labels.size()));
            if (!ml.prevalence.empty()) write_file_atomic(ml.prevalence, prevalence_csv(table));
            write_file_atomic(sibling_manifest(ml.out), manifest.render(app));
            for (const auto& r : table) out << r.label << "\t" << r.text << "\n";
        };
    });

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? 0 : 1;
    }

    for (auto* sub : app.get_subcommands()) manifest.command = sub->get_name();
    try {
        if (!action) throw ConfigError("no subcommand given");
        action();
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const RuntimeError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

}  // namespace ecgclip
