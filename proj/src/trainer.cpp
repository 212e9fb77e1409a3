#include "ecgclip/trainer.hpp"

#include "ecgclip/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace ecgclip {

OptimizerState OptimizerState::init(Eigen::Index size, const AdamWConfig& config) {
    OptimizerState s;
    s.m = Eigen::VectorXd::Zero(size);
    s.v = Eigen::VectorXd::Zero(size);
    s.config = config;
    return s;
}

void adamw_step(Eigen::Ref<Eigen::VectorXd> params, const Eigen::Ref<const Eigen::VectorXd>& grads, OptimizerState& state,
                const std::vector<char>* trainable) {
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw ShapeError("optimizer state, parameters and gradients differ in size");
    for (Eigen::Index i = 0; i < grads.size(); ++i)
        if (!std::isfinite(grads[i]))
            throw NumericError("non-finite gradient at parameter index " + std::to_string(i) + " (step " +
                               std::to_string(state.step + 1) + "); update aborted");
    const auto& c = state.config;
    state.step += 1;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
    for (Eigen::Index i = 0; i < params.size(); ++i) {
        if (trainable && !(*trainable)[static_cast<std::size_t>(i)]) continue;
        const double g = grads[i];
        state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
        state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
        if (c.weight_decay != 0.0) params[i] -= state.lr * c.weight_decay * params[i];
        const double m_hat = state.m[i] / bc1;
        const double v_hat = state.v[i] / bc2;
        params[i] -= state.lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
}

// ---------------------------------------------------------------------------

void ScheduleSpec::validate() const {
    if (mode == Mode::warm_restarts) {
        if (!(peak > eta_min && eta_min >= 0.0)) throw ConfigError("schedule needs peak > eta_min >= 0");
        if (t0 < 1) throw ConfigError("schedule T0 must be at least 1");
        if (t_mult < 1.0) throw ConfigError("schedule Tmult must be at least 1");
    } else {
        if (!(peak > 0.0) || warmup_start < 0.0) throw ConfigError("schedule needs a positive peak");
        if (warmup_iters < 0 || total_iters < 1 || warmup_iters >= total_iters)
            throw ConfigError("schedule needs 0 <= warmup_iters < total_iters");
    }
}

ScheduleSpec ScheduleSpec::pretrain_default() { return {}; }

ScheduleSpec ScheduleSpec::finetune_default(long total_iters) {
    ScheduleSpec s;
    s.mode = Mode::warmup_cosine;
    s.peak = 5e-4;
    s.warmup_start = 1e-6;
    s.warmup_iters = 200;
    s.total_iters = total_iters;
    return s;
}

double lr_at(const ScheduleSpec& spec, long t) {
    if (t < 0) t = 0;
    if (spec.mode == ScheduleSpec::Mode::warm_restarts) {
        double period = static_cast<double>(spec.t0);
        double pos = static_cast<double>(t);
        if (spec.t_mult == 1.0) {
            pos = static_cast<double>(t % spec.t0);
        } else {
            while (pos >= period) {
                pos -= period;
                period *= spec.t_mult;
            }
        }
        return spec.eta_min + (spec.peak - spec.eta_min) * (1.0 + std::cos(std::numbers::pi * pos / period)) / 2.0;
    }
    if (t < spec.warmup_iters)
        return spec.warmup_start +
               (spec.peak - spec.warmup_start) * static_cast<double>(t) / static_cast<double>(spec.warmup_iters);
    if (t >= spec.total_iters) return 0.0;
    const double frac = static_cast<double>(t - spec.warmup_iters) / static_cast<double>(spec.total_iters - spec.warmup_iters);
    return spec.peak * (1.0 + std::cos(std::numbers::pi * frac)) / 2.0;
}

std::string metrics_csv(const std::vector<MetricRow>& rows) {
    std::string out = "iteration,split,metric,value\n";
    for (const auto& r : rows) out += csv_line({std::to_string(r.iteration), r.split, r.metric, format_double(r.value)});
    return out;
}

std::vector<SignalTensor> prepare_tensors(const Cohort& cohort, const std::vector<std::size_t>& indices, std::size_t workers) {
    std::vector<SignalTensor> out(indices.size());
    parallel_for(indices.size(), workers, [&](std::size_t k) {
        const auto& rec = cohort.records.at(indices[k]);
        out[k] = is_tensor_record(rec) ? SignalTensor::from_record(rec) : preprocess(rec);
    });
    return out;
}

namespace {

constexpr std::size_t kChunk = 8;

// Sums per-record gradient contributions in a fixed order: records are grouped into
// fixed chunks, each chunk is accumulated serially, and chunk buffers are added in
// index order. The result does not depend on the worker count.
template <typename Fn>
ModelParams reduce_chunks(const ModelParams& like, std::size_t n, std::size_t workers, Fn&& fn) {
    const std::size_t n_chunks = (n + kChunk - 1) / kChunk;
    std::vector<ModelParams> bufs(n_chunks);
    parallel_for(n_chunks, workers, [&](std::size_t c) {
        bufs[c] = like.zeros_like();
        for (std::size_t i = c * kChunk; i < std::min(n, (c + 1) * kChunk); ++i) fn(i, bufs[c]);
    });
    ModelParams total = like.zeros_like();
    for (const auto& b : bufs) total.values() += b.values();
    return total;
}

std::string fmt(double v) { return format_double(v, 15); }

void add_schedule(std::map<std::string, std::string>& m, const ScheduleSpec& s) {
    m["schedule.mode"] = s.mode == ScheduleSpec::Mode::warm_restarts ? "warm_restarts" : "warmup_cosine";
    m["schedule.peak"] = fmt(s.peak);
    m["schedule.t0"] = std::to_string(s.t0);
    m["schedule.t_mult"] = fmt(s.t_mult);
    m["schedule.eta_min"] = fmt(s.eta_min);
    m["schedule.warmup_start"] = fmt(s.warmup_start);
    m["schedule.warmup_iters"] = std::to_string(s.warmup_iters);
    m["schedule.total_iters"] = std::to_string(s.total_iters);
}

void add_adamw(std::map<std::string, std::string>& m, const AdamWConfig& a) {
    m["adamw.beta1"] = fmt(a.beta1);
    m["adamw.beta2"] = fmt(a.beta2);
    m["adamw.eps"] = fmt(a.eps);
    m["adamw.weight_decay"] = fmt(a.weight_decay);
}

std::string join(const std::vector<std::string>& v, char sep) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? std::string(1, sep) : "") + v[i];
    return out;
}

std::string report_for(const Cohort& cohort, const std::string& record_id) {
    auto it = cohort.reports.find(record_id);
    return it == cohort.reports.end() ? std::string() : it->second;
}

}  // namespace

// ---------------------------------------------------------------------------
// Pretraining

BatchLoss pretrain_batch_loss(const ModelParams& params, const std::vector<const SignalTensor*>& tensors,
                              const std::vector<const std::string*>& reports, const PretrainConfig& config,
                              std::uint64_t step_seed) {
    const std::size_t n = tensors.size();
    if (n == 0 || reports.size() != n) throw ShapeError("batch needs matching, non-empty signals and reports");

    struct Forward {
        TrunkTape trunk;
        DropoutMask m1, m2;
        ProjectorTape clean, v1, v2;
        TextTape text;
    };
    std::vector<Forward> fwd(n);
    parallel_for(n, config.workers, [&](std::size_t i) {
        auto& f = fwd[i];
        f.trunk = trunk_forward(params, tensors[i]->data.cast<double>());
        Rng rng = make_rng(step_seed, i);
        const auto dim = f.trunk.features.size();
        f.m1 = DropoutMask::draw(dim, config.dropout, rng, step_seed);
        f.m2 = DropoutMask::draw(dim, config.dropout, rng, step_seed);
        f.clean = projector_forward(params, "proj_ecg", f.trunk.features);
        f.v1 = projector_forward(params, "proj_ecg", f.trunk.features.cwiseProduct(f.m1.scale));
        f.v2 = projector_forward(params, "proj_ecg", f.trunk.features.cwiseProduct(f.m2.scale));
        f.text = text_forward(params, *reports[i]);
    });

    const Eigen::Index d = fwd[0].clean.embedding.size();
    Eigen::MatrixXd e(n, d), r(n, d), eh(n, d), et(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = static_cast<Eigen::Index>(i);
        e.row(row) = fwd[i].clean.embedding.transpose();
        r.row(row) = fwd[i].text.proj.embedding.transpose();
        eh.row(row) = fwd[i].v1.embedding.transpose();
        et.row(row) = fwd[i].v2.embedding.transpose();
    }
    const auto loss = combined_loss<double>(e, r, eh, et, config.tau, config.weights);

    BatchLoss out;
    out.value = loss.value;
    out.grad = reduce_chunks(params, n, config.workers, [&](std::size_t i, ModelParams& g) {
        const auto& f = fwd[i];
        const auto row = static_cast<Eigen::Index>(i);
        Eigen::VectorXd dh = projector_backward(params, "proj_ecg", f.clean, loss.grads[0].row(row).transpose(), g);
        dh += f.m1.scale.cwiseProduct(projector_backward(params, "proj_ecg", f.v1, loss.grads[2].row(row).transpose(), g));
        dh += f.m2.scale.cwiseProduct(projector_backward(params, "proj_ecg", f.v2, loss.grads[3].row(row).transpose(), g));
        trunk_backward(params, f.trunk, dh, g);
        text_backward(params, f.text, loss.grads[1].row(row).transpose(), g);
    });
    return out;
}

double evaluate_retrieval(const ModelParams& params, const std::vector<SignalTensor>& tensors,
                          const std::vector<std::string>& reports, std::size_t workers) {
    const std::size_t n = tensors.size();
    if (n == 0 || reports.size() != n) throw ConfigError("retrieval evaluation needs a non-empty validation split");
    std::vector<Eigen::VectorXd> es(n), rs(n);
    parallel_for(n, workers, [&](std::size_t i) {
        es[i] = encode_signal(params, tensors[i]).values;
        rs[i] = encode_text(params, reports[i]).values;
    });
    const Eigen::Index d = es[0].size();
    Eigen::MatrixXd e(n, d), r(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        e.row(static_cast<Eigen::Index>(i)) = es[i].transpose();
        r.row(static_cast<Eigen::Index>(i)) = rs[i].transpose();
    }
    return retrieval_recall_at_1(e, r);
}

TrainResult pretrain(const std::vector<SignalTensor>& train_x, const std::vector<std::string>& train_reports,
                     const std::vector<SignalTensor>& val_x, const std::vector<std::string>& val_reports,
                     const PretrainConfig& config) {
    if (train_x.empty()) throw ConfigError("pretraining split is empty");
    if (val_x.empty()) throw ConfigError("validation split is empty");
    if (train_reports.size() != train_x.size() || val_reports.size() != val_x.size())
        throw ShapeError("signals and reports differ in count");
    if (config.batch_size < 1) throw ConfigError("batch size must be positive");
    if (train_x.size() < static_cast<std::size_t>(config.batch_size))
        throw ConfigError("pretraining split holds fewer records than one batch");
    if (!(config.tau > 0.0)) throw InvalidTemperature("temperature must be positive");
    if (!(config.dropout >= 0.0 && config.dropout < 1.0)) throw InvalidRate("dropout rate must be in [0, 1)");
    if (config.epochs < 1) throw ConfigError("epochs must be positive");
    config.schedule.validate();

    TrainResult res;
    ModelParams params = init_model(config.encoder, config.seed);
    calibrate_feature_norm(params, train_x, config.workers);
    OptimizerState state = OptimizerState::init(params.size(), config.adamw);
    // The feature normalisation stays at its calibrated values.
    std::vector<char> trainable(static_cast<std::size_t>(params.size()), 1);
    for (const auto& b : params.layout())
        if (b.name.rfind("feat.", 0) == 0) std::fill_n(trainable.begin() + b.offset, b.size(), 0);

    res.initial_score = evaluate_retrieval(params, val_x, val_reports, config.workers);
    res.best_score = res.initial_score;
    res.best.params = params;
    res.trajectory.push_back({0, "val", "recall_at_1", res.initial_score});

    const std::size_t batch = static_cast<std::size_t>(config.batch_size);
    const std::size_t per_epoch = train_x.size() / batch;  // trailing partial batch dropped
    long step = 0;
    bool done = false;
    for (int epoch = 0; epoch < config.epochs && !done; ++epoch) {
        std::vector<std::size_t> order(train_x.size());
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng = make_rng(config.seed, 0x5000 + static_cast<std::uint64_t>(epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        for (std::size_t b = 0; b < per_epoch; ++b) {
            if (config.max_steps > 0 && step >= config.max_steps) {
                done = true;
                break;
            }
            std::vector<const SignalTensor*> xs;
            std::vector<const std::string*> rs;
            for (std::size_t k = b * batch; k < (b + 1) * batch; ++k) {
                xs.push_back(&train_x[order[k]]);
                rs.push_back(&train_reports[order[k]]);
            }
            const auto bl = pretrain_batch_loss(params, xs, rs, config, mix_seed(config.seed, 0x70000000ull + static_cast<std::uint64_t>(step)));
            state.lr = lr_at(config.schedule, step);
            adamw_step(params.values(), bl.grad.values(), state, &trainable);
            res.trajectory.push_back({step, "train", "loss", bl.value});
            res.trajectory.push_back({step, "train", "lr", state.lr});
            ++step;
        }
        if (config.max_steps > 0 && step >= config.max_steps) done = true;
        const double recall = evaluate_retrieval(params, val_x, val_reports, config.workers);
        res.trajectory.push_back({step, "val", "recall_at_1", recall});
        if (recall > res.best_score) {
            res.best_score = recall;
            res.best.params = params;
            res.best_iteration = step;
        }
    }
    res.steps = step;

    auto& m = res.manifest;
    m["command"] = "pretrain";
    m["seed"] = std::to_string(config.seed);
    m["tau"] = fmt(config.tau);
    m["dropout"] = fmt(config.dropout);
    m["loss.cma_weight"] = fmt(config.weights.cma);
    m["loss.uma_weight"] = fmt(config.weights.uma);
    m["batch_size"] = std::to_string(config.batch_size);
    m["epochs"] = std::to_string(config.epochs);
    m["max_steps"] = std::to_string(config.max_steps);
    add_schedule(m, config.schedule);
    add_adamw(m, config.adamw);
    m["encoder.channels"] = join([&] {
        std::vector<std::string> v;
        for (int c : config.encoder.channels) v.push_back(std::to_string(c));
        return v;
    }(), ',');
    m["encoder.kernel"] = std::to_string(config.encoder.kernel);
    m["encoder.stride"] = std::to_string(config.encoder.stride);
    m["encoder.embed_dim"] = std::to_string(config.encoder.embed_dim);
    m["n_train"] = std::to_string(train_x.size());
    m["n_val"] = std::to_string(val_x.size());
    m["steps"] = std::to_string(step);
    m["selected_iteration"] = std::to_string(res.best_iteration);
    m["selected_val_recall_at_1"] = format_double(res.best_score);
    m["initial_val_recall_at_1"] = format_double(res.initial_score);

    res.best.meta["kind"] = "encoder";
    res.best.meta["selected_iteration"] = std::to_string(res.best_iteration);
    res.best.meta["val_recall_at_1"] = format_double(res.best_score);
    res.best.meta["tau"] = fmt(config.tau);
    res.best.meta["dropout"] = fmt(config.dropout);
    res.best.meta["seed"] = std::to_string(config.seed);
    m["checkpoint_id"] = hex64(fnv1a64(serialize_checkpoint(res.best)));
    return res;
}

TrainResult pretrain(const Cohort& cohort, const SplitPlan& splits, const PretrainConfig& config) {
    const auto train_idx = splits.record_indices(cohort, config.train_split);
    const auto val_idx = splits.record_indices(cohort, config.val_split);
    if (train_idx.empty()) throw ConfigError("split '" + config.train_split + "' has no records");
    if (val_idx.empty()) throw ConfigError("split '" + config.val_split + "' has no records");
    auto train_x = prepare_tensors(cohort, train_idx, config.workers);
    auto val_x = prepare_tensors(cohort, val_idx, config.workers);
    std::vector<std::string> train_r, val_r;
    for (auto i : train_idx) train_r.push_back(report_for(cohort, cohort.records[i].record_id));
    for (auto i : val_idx) val_r.push_back(report_for(cohort, cohort.records[i].record_id));
    return pretrain(train_x, train_r, val_x, val_r, config);
}

// ---------------------------------------------------------------------------
// Fine-tuning

ModelParams attach_head(const ModelParams& encoder, std::size_t n_tasks) {
    if (n_tasks == 0) throw ConfigError("no tasks to fine-tune");
    ModelParams p;
    p.hyper() = encoder.hyper();
    for (const auto& b : encoder.layout()) {
        if (b.name.rfind("head.", 0) == 0) continue;
        p.add_block(b.name, b.rows, b.cols);
        p.mat(b.name) = encoder.mat(b.name);
    }
    const auto features = config_from_layout(encoder).feature_dim();
    p.add_block("head.weight", static_cast<Eigen::Index>(n_tasks), features);
    p.add_block("head.bias", static_cast<Eigen::Index>(n_tasks), 1);
    return p;
}

std::vector<std::string> head_tasks(const Checkpoint& ckpt) {
    auto it = ckpt.meta.find("tasks");
    if (it == ckpt.meta.end() || !ckpt.params.has("head.weight")) throw ConfigError("checkpoint has no classification head");
    auto tasks = split(it->second, ',');
    if (static_cast<Eigen::Index>(tasks.size()) != ckpt.params.block("head.weight").rows)
        throw ConfigError("checkpoint task list does not match its head");
    return tasks;
}

Eigen::VectorXd task_logits(const ModelParams& params, const Eigen::Ref<const Eigen::MatrixXd>& x) {
    const auto tape = trunk_forward(params, x);
    return params.mat("head.weight") * tape.features + params.mat("head.bias").col(0);
}

namespace {

double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

Eigen::MatrixXd label_matrix(const Labelled& data, const std::vector<std::string>& tasks) {
    Eigen::MatrixXd y = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(data.x.size()), static_cast<Eigen::Index>(tasks.size()));
    for (std::size_t i = 0; i < data.labels.size(); ++i)
        for (std::size_t t = 0; t < tasks.size(); ++t)
            if (data.labels[i].count(tasks[t])) y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t)) = 1.0;
    return y;
}

std::vector<ScoredTask> scored_from_logits(const std::vector<Eigen::VectorXd>& logits, const Labelled& data,
                                           const std::vector<std::string>& tasks) {
    std::vector<ScoredTask> out(tasks.size());
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        auto& st = out[t];
        st.task_id = tasks[t];
        st.record_ids = data.record_ids;
        st.scores.resize(static_cast<Eigen::Index>(logits.size()));
        for (std::size_t i = 0; i < logits.size(); ++i) {
            st.scores[static_cast<Eigen::Index>(i)] = sigmoid(logits[i][static_cast<Eigen::Index>(t)]);
            st.labels.push_back(data.labels[i].count(tasks[t]) ? 1 : 0);
        }
    }
    return out;
}

}  // namespace

std::vector<ScoredTask> predict(const Checkpoint& ckpt, const Labelled& data, std::size_t workers) {
    const auto tasks = head_tasks(ckpt);
    std::vector<Eigen::VectorXd> logits(data.x.size());
    parallel_for(data.x.size(), workers, [&](std::size_t i) { logits[i] = task_logits(ckpt.params, data.x[i].data.cast<double>()); });
    return scored_from_logits(logits, data, tasks);
}

double macro_prauc(const std::vector<ScoredTask>& tasks, std::vector<std::string>* warnings) {
    double sum = 0.0;
    int used = 0;
    for (const auto& t : tasks) {
        if (t.positives() == 0) {
            if (warnings) warnings->push_back("task " + t.task_id + " has no validation positives; excluded from macro-PRAUC");
            continue;
        }
        sum += prauc(t);
        ++used;
    }
    if (used == 0) throw ConfigError("no task has validation positives");
    return sum / used;
}

Labelled labelled_split(const Cohort& cohort, const SplitPlan& splits, const std::string& split, std::size_t workers) {
    const auto idx = splits.record_indices(cohort, split);
    Labelled out;
    out.x = prepare_tensors(cohort, idx, workers);
    for (auto i : idx) {
        out.record_ids.push_back(cohort.records[i].record_id);
        out.labels.push_back(cohort.records[i].labels);
    }
    return out;
}

TrainResult finetune(const Checkpoint& encoder, const Labelled& train, const Labelled& val, const FinetuneConfig& config) {
    if (config.tasks.empty()) throw ConfigError("label space is empty");
    if (train.x.empty()) throw ConfigError("fine-tuning split is empty");
    if (val.x.empty()) throw ConfigError("validation split is empty");
    if (config.batch_size < 1 || config.iterations < 1 || config.eval_interval < 1)
        throw ConfigError("batch size, iterations and eval interval must be positive");
    ScheduleSpec schedule = config.schedule;
    if (schedule.mode == ScheduleSpec::Mode::warmup_cosine) schedule.total_iters = config.iterations;
    schedule.validate();

    TrainResult res;
    const std::size_t n_tasks = config.tasks.size();
    ModelParams params = attach_head(encoder.params, n_tasks);
    OptimizerState state = OptimizerState::init(params.size(), config.adamw);

    std::vector<char> trainable(static_cast<std::size_t>(params.size()), 0);
    for (const auto& b : params.layout()) {
        const bool on = b.name.rfind("head.", 0) == 0 || (config.full_finetune && b.name.rfind("conv", 0) == 0);
        if (on) std::fill_n(trainable.begin() + b.offset, b.size(), 1);
    }

    const Eigen::MatrixXd y = label_matrix(train, config.tasks);
    std::vector<Eigen::VectorXd> cached;
    if (!config.full_finetune) {
        cached.resize(train.x.size());
        parallel_for(train.x.size(), config.workers, [&](std::size_t i) {
            cached[i] = trunk_forward(params, train.x[i].data.cast<double>()).features;
        });
    }
    std::vector<Eigen::VectorXd> val_features;
    auto val_scores = [&]() {
        if (config.full_finetune || val_features.empty()) {
            val_features.resize(val.x.size());
            parallel_for(val.x.size(), config.workers, [&](std::size_t i) {
                val_features[i] = trunk_forward(params, val.x[i].data.cast<double>()).features;
            });
        }
        std::vector<Eigen::VectorXd> logits(val.x.size());
        for (std::size_t i = 0; i < val.x.size(); ++i)
            logits[i] = params.mat("head.weight") * val_features[i] + params.mat("head.bias").col(0);
        return scored_from_logits(logits, val, config.tasks);
    };

    {
        std::vector<ScoredTask> probe = scored_from_logits(
            std::vector<Eigen::VectorXd>(val.x.size(), Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_tasks))), val,
            config.tasks);
        macro_prauc(probe, &res.warnings);
    }

    const std::size_t n = train.x.size();
    std::vector<std::size_t> order(n);
    std::size_t cursor = 0;
    int epoch = 0;
    res.best_score = -1.0;
    for (long it = 0; it < config.iterations; ++it) {
        if (cursor == 0) {
            std::iota(order.begin(), order.end(), 0);
            Rng shuffle_rng = make_rng(config.seed, 0x6000 + static_cast<std::uint64_t>(epoch));
            std::shuffle(order.begin(), order.end(), shuffle_rng);
        }
        const std::size_t end = std::min(n, cursor + static_cast<std::size_t>(config.batch_size));
        const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                             order.begin() + static_cast<std::ptrdiff_t>(end));
        cursor = end;
        if (cursor >= n) {
            cursor = 0;
            ++epoch;
        }

        const double denom = static_cast<double>(batch.size() * n_tasks);
        std::vector<double> losses(batch.size(), 0.0);
        const ModelParams grad = reduce_chunks(params, batch.size(), config.workers, [&](std::size_t k, ModelParams& g) {
            const std::size_t i = batch[k];
            TrunkTape tape;
            const Eigen::VectorXd* h = nullptr;
            if (config.full_finetune) {
                tape = trunk_forward(params, train.x[i].data.cast<double>());
                h = &tape.features;
            } else {
                h = &cached[i];
            }
            const Eigen::VectorXd z = params.mat("head.weight") * *h + params.mat("head.bias").col(0);
            Eigen::VectorXd dz(z.size());
            double l = 0.0;
            for (Eigen::Index t = 0; t < z.size(); ++t) {
                const double yt = y(static_cast<Eigen::Index>(i), t);
                l += softplus(z[t]) - yt * z[t];
                dz[t] = (sigmoid(z[t]) - yt) / denom;
            }
            losses[k] = l / denom;
            g.mat("head.weight").noalias() += dz * h->transpose();
            g.mat("head.bias").col(0) += dz;
            if (config.full_finetune) {
                const Eigen::VectorXd dh = params.mat("head.weight").transpose() * dz;
                trunk_backward(params, tape, dh, g);
            }
        });
        double loss = 0.0;
        for (double l : losses) loss += l;

        state.lr = lr_at(schedule, it);
        adamw_step(params.values(), grad.values(), state, &trainable);
        res.trajectory.push_back({it, "train", "bce", loss});

        if ((it + 1) % config.eval_interval == 0 || it + 1 == config.iterations) {
            const auto scored = val_scores();
            const double macro = macro_prauc(scored);
            for (const auto& t : scored)
                if (t.positives() > 0) res.trajectory.push_back({it + 1, "val", "prauc_" + t.task_id, prauc(t)});
            res.trajectory.push_back({it + 1, "val", "macro_prauc", macro});
            if (macro > res.best_score) {
                res.best_score = macro;
                res.best.params = params;
                res.best_iteration = it + 1;
            }
        }
    }
    res.steps = config.iterations;

    std::string tasks;
    for (std::size_t t = 0; t < n_tasks; ++t) tasks += (t ? "," : "") + config.tasks[t];
    res.best.meta["kind"] = "classifier";
    res.best.meta["tasks"] = tasks;
    res.best.meta["selected_iteration"] = std::to_string(res.best_iteration);
    res.best.meta["val_macro_prauc"] = format_double(res.best_score);
    res.best.meta["full_finetune"] = config.full_finetune ? "true" : "false";
    res.best.meta["seed"] = std::to_string(config.seed);

    auto& m = res.manifest;
    m["command"] = "finetune";
    m["seed"] = std::to_string(config.seed);
    m["tasks"] = tasks;
    m["full_finetune"] = config.full_finetune ? "true" : "false";
    m["batch_size"] = std::to_string(config.batch_size);
    m["iterations"] = std::to_string(config.iterations);
    m["eval_interval"] = std::to_string(config.eval_interval);
    add_schedule(m, schedule);
    add_adamw(m, config.adamw);
    m["n_train"] = std::to_string(train.x.size());
    m["n_val"] = std::to_string(val.x.size());
    m["selected_iteration"] = std::to_string(res.best_iteration);
    m["selected_val_macro_prauc"] = format_double(res.best_score);
    m["checkpoint_id"] = hex64(fnv1a64(serialize_checkpoint(res.best)));
    return res;
}

TrainResult finetune(const Checkpoint& encoder, const Cohort& cohort, const SplitPlan& splits, const FinetuneConfig& config) {
    auto train = labelled_split(cohort, splits, config.train_split, config.workers);
    auto val = labelled_split(cohort, splits, config.val_split, config.workers);
    return finetune(encoder, train, val, config);
}

std::string manifest_text(const std::map<std::string, std::string>& manifest) {
    std::string out;
    for (const auto& [k, v] : manifest) out += k + "=" + v + "\n";
    return out;
}

}  // namespace ecgclip
