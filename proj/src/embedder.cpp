#include "ecgclip/embedder.hpp"

#include "ecgclip/errors.hpp"

#include <bit>
#include <cctype>
#include <cmath>

namespace ecgclip {

// ---------------------------------------------------------------------------
// Parameters

void ModelParams::add_block(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    if (index_.count(name)) throw InvalidSpec("duplicate parameter block " + name);
    ParamBlock b{name, rows, cols, values_.size()};
    index_[name] = layout_.size();
    layout_.push_back(b);
    Eigen::VectorXd grown = Eigen::VectorXd::Zero(values_.size() + b.size());
    grown.head(values_.size()) = values_;
    values_ = std::move(grown);
}

const ParamBlock& ModelParams::block(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidSpec("no parameter block " + name);
    return layout_[it->second];
}

Eigen::Map<Eigen::MatrixXd> ModelParams::mat(const std::string& name) {
    const auto& b = block(name);
    return {values_.data() + b.offset, b.rows, b.cols};
}

Eigen::Map<const Eigen::MatrixXd> ModelParams::mat(const std::string& name) const {
    const auto& b = block(name);
    return {values_.data() + b.offset, b.rows, b.cols};
}

ModelParams ModelParams::zeros_like() const {
    ModelParams z = *this;
    z.values_.setZero();
    return z;
}

void ModelParams::validate() const {
    Eigen::Index total = 0;
    for (const auto& b : layout_) {
        if (b.offset != total) throw InvalidSpec("parameter layout is not contiguous at " + b.name);
        total += b.size();
    }
    if (total != values_.size()) throw InvalidSpec("parameter layout does not cover the flat vector");
    if (!values_.allFinite()) throw NumericError("parameters contain non-finite values");
}

DropoutMask DropoutMask::draw(Eigen::Index dim, double p, Rng& rng, std::uint64_t seed) {
    if (!(p >= 0.0 && p < 1.0)) throw InvalidRate("dropout rate must be in [0, 1)");
    DropoutMask m;
    m.p = p;
    m.seed = seed;
    m.scale = Eigen::VectorXd::Constant(dim, 1.0 / (1.0 - p));
    if (p > 0.0) {
        std::bernoulli_distribution drop(p);
        for (Eigen::Index i = 0; i < dim; ++i)
            if (drop(rng)) m.scale[i] = 0.0;
    }
    return m;
}

namespace {

std::string conv_name(std::size_t layer, const char* what) { return "conv" + std::to_string(layer) + "." + what; }

void fill_normal(Eigen::Map<Eigen::MatrixXd> m, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
}

void add_projector(ModelParams& p, const std::string& prefix, int in, int hidden, int out) {
    p.add_block(prefix + ".w1", hidden, in);
    p.add_block(prefix + ".b1", hidden, 1);
    p.add_block(prefix + ".w2", out, hidden);
    p.add_block(prefix + ".b2", out, 1);
}

Eigen::MatrixXd softplus(const Eigen::MatrixXd& x) {
    return x.unaryExpr([](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); });
}

Eigen::MatrixXd sigmoid(const Eigen::MatrixXd& x) {
    return x.unaryExpr([](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
    });
}

void check_finite(const Eigen::MatrixXd& m, const std::string& where) {
    if (!m.allFinite()) throw NumericError("non-finite activation in " + where);
}

}  // namespace

ModelParams init_model(const EncoderConfig& config, std::uint64_t seed) {
    if (config.channels.empty() || config.kernel < 1 || config.stride < 1) throw InvalidSpec("invalid encoder config");
    ModelParams p;
    p.hyper()["kernel"] = config.kernel;
    p.hyper()["stride"] = config.stride;
    p.hyper()["in_leads"] = config.in_leads;
    int in = config.in_leads;
    for (std::size_t l = 0; l < config.channels.size(); ++l) {
        const int out = config.channels[l];
        p.add_block(conv_name(l, "weight"), out, static_cast<Eigen::Index>(in) * config.kernel);
        p.add_block(conv_name(l, "bias"), out, 1);
        p.add_block(conv_name(l, "scale"), out, 1);
        p.add_block(conv_name(l, "shift"), out, 1);
        in = out;
    }
    p.add_block("feat.center", config.feature_dim(), 1);
    p.add_block("feat.scale", config.feature_dim(), 1);
    p.add_block("text.weight", config.text_hidden, config.text_buckets);
    p.add_block("text.bias", config.text_hidden, 1);
    add_projector(p, "proj_ecg", config.feature_dim(), config.proj_hidden, config.embed_dim);
    add_projector(p, "proj_text", config.text_hidden, config.proj_hidden, config.embed_dim);

    Rng rng = make_rng(seed, 0xe9c);
    in = config.in_leads;
    for (std::size_t l = 0; l < config.channels.size(); ++l) {
        fill_normal(p.mat(conv_name(l, "weight")), std::sqrt(2.0 / (in * config.kernel)), rng);
        p.mat(conv_name(l, "scale")).setOnes();
        in = config.channels[l];
    }
    p.mat("feat.scale").setOnes();
    fill_normal(p.mat("text.weight"), 1.0, rng);
    for (const std::string prefix : {"proj_ecg", "proj_text"}) {
        auto w1 = p.mat(prefix + ".w1");
        fill_normal(w1, 1.0 / std::sqrt(static_cast<double>(w1.cols())), rng);
        auto w2 = p.mat(prefix + ".w2");
        fill_normal(w2, 1.0 / std::sqrt(static_cast<double>(w2.cols())), rng);
    }
    return p;
}

EncoderConfig config_from_layout(const ModelParams& params) {
    EncoderConfig c;
    c.kernel = static_cast<int>(params.hyper().at("kernel"));
    c.stride = static_cast<int>(params.hyper().at("stride"));
    c.in_leads = static_cast<int>(params.hyper().at("in_leads"));
    c.channels.clear();
    for (std::size_t l = 0; params.has(conv_name(l, "weight")); ++l)
        c.channels.push_back(static_cast<int>(params.block(conv_name(l, "weight")).rows));
    c.text_hidden = static_cast<int>(params.block("text.weight").rows);
    c.text_buckets = static_cast<int>(params.block("text.weight").cols);
    c.proj_hidden = static_cast<int>(params.block("proj_ecg.w1").rows);
    c.embed_dim = static_cast<int>(params.block("proj_ecg.w2").rows);
    return c;
}

// ---------------------------------------------------------------------------
// Conv trunk

TrunkTape trunk_forward(const ModelParams& params, const Eigen::Ref<const Eigen::MatrixXd>& x) {
    const auto kernel = static_cast<Eigen::Index>(params.hyper().at("kernel"));
    const auto stride = static_cast<Eigen::Index>(params.hyper().at("stride"));
    const Eigen::Index pad = kernel / 2;

    TrunkTape tape;
    Eigen::MatrixXd act = x;
    for (std::size_t l = 0; params.has(conv_name(l, "weight")); ++l) {
        const auto w = params.mat(conv_name(l, "weight"));
        const Eigen::Index c_in = act.rows();
        if (w.cols() != c_in * kernel) throw ShapeError("conv" + std::to_string(l) + " expects " +
                                                        std::to_string(w.cols() / kernel) + " input channels");
        const Eigen::Index len = act.cols();
        const Eigen::Index out_len = (len + 2 * pad - kernel) / stride + 1;
        ConvTape ct;
        ct.in_len = len;
        ct.patches = Eigen::MatrixXd::Zero(c_in * kernel, out_len);
        for (Eigen::Index j = 0; j < out_len; ++j) {
            const Eigen::Index start = j * stride - pad;
            for (Eigen::Index t = 0; t < kernel; ++t) {
                const Eigen::Index src = start + t;
                if (src < 0 || src >= len) continue;
                for (Eigen::Index c = 0; c < c_in; ++c) ct.patches(c * kernel + t, j) = act(c, src);
            }
        }
        ct.conv.noalias() = w * ct.patches;
        ct.conv.colwise() += params.mat(conv_name(l, "bias")).col(0);
        ct.pre = params.mat(conv_name(l, "scale")).col(0).asDiagonal() * ct.conv;
        ct.pre.colwise() += params.mat(conv_name(l, "shift")).col(0);
        act = softplus(ct.pre);
        check_finite(act, "conv" + std::to_string(l));
        tape.layers.push_back(std::move(ct));
    }
    tape.pooled = act.rowwise().mean();
    tape.features = tape.pooled;
    if (params.has("feat.center"))
        tape.features = (tape.pooled - params.mat("feat.center").col(0)).cwiseProduct(params.mat("feat.scale").col(0));
    return tape;
}

void trunk_backward(const ModelParams& params, const TrunkTape& tape, const Eigen::Ref<const Eigen::VectorXd>& dfeatures,
                    ModelParams& grad, Eigen::MatrixXd* dx) {
    const auto kernel = static_cast<Eigen::Index>(params.hyper().at("kernel"));
    const auto stride = static_cast<Eigen::Index>(params.hyper().at("stride"));
    const Eigen::Index pad = kernel / 2;

    const auto& last = tape.layers.back();
    Eigen::VectorXd dpooled = dfeatures;
    if (params.has("feat.center")) {
        const auto scale = params.mat("feat.scale").col(0);
        dpooled = dfeatures.cwiseProduct(scale);
        grad.mat("feat.center").col(0) -= dpooled;
        grad.mat("feat.scale").col(0) += (tape.pooled - params.mat("feat.center").col(0)).cwiseProduct(dfeatures);
    }
    Eigen::MatrixXd dact = dpooled.replicate(1, last.pre.cols()) / static_cast<double>(last.pre.cols());
    for (std::size_t li = tape.layers.size(); li-- > 0;) {
        const auto& ct = tape.layers[li];
        const auto w = params.mat(conv_name(li, "weight"));
        const auto scale = params.mat(conv_name(li, "scale")).col(0);
        const Eigen::MatrixXd dpre = dact.cwiseProduct(sigmoid(ct.pre));
        grad.mat(conv_name(li, "scale")).col(0) += dpre.cwiseProduct(ct.conv).rowwise().sum();
        grad.mat(conv_name(li, "shift")).col(0) += dpre.rowwise().sum();
        const Eigen::MatrixXd dconv = scale.asDiagonal() * dpre;
        grad.mat(conv_name(li, "bias")).col(0) += dconv.rowwise().sum();
        grad.mat(conv_name(li, "weight")).noalias() += dconv * ct.patches.transpose();
        if (li == 0 && dx == nullptr) break;

        const Eigen::MatrixXd dpatches = w.transpose() * dconv;
        const Eigen::Index c_in = dpatches.rows() / kernel;
        Eigen::MatrixXd din = Eigen::MatrixXd::Zero(c_in, ct.in_len);
        for (Eigen::Index j = 0; j < dpatches.cols(); ++j) {
            const Eigen::Index start = j * stride - pad;
            for (Eigen::Index t = 0; t < kernel; ++t) {
                const Eigen::Index src = start + t;
                if (src < 0 || src >= ct.in_len) continue;
                for (Eigen::Index c = 0; c < c_in; ++c) din(c, src) += dpatches(c * kernel + t, j);
            }
        }
        if (li == 0) {
            *dx = std::move(din);
            break;
        }
        dact = std::move(din);
    }
}

void calibrate_feature_norm(ModelParams& params, const std::vector<SignalTensor>& inputs, std::size_t workers) {
    if (inputs.size() < 2) throw ShapeError("feature calibration needs at least two inputs");
    std::vector<Eigen::VectorXd> pooled(inputs.size());
    parallel_for(inputs.size(), workers, [&](std::size_t i) { pooled[i] = trunk_forward(params, inputs[i].data.cast<double>()).pooled; });
    const auto n = static_cast<double>(inputs.size());
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(pooled[0].size());
    for (const auto& p : pooled) mean += p;
    mean /= n;
    Eigen::VectorXd var = Eigen::VectorXd::Zero(mean.size());
    for (const auto& p : pooled) var += (p - mean).cwiseAbs2();
    var /= n;
    params.mat("feat.center").col(0) = mean;
    for (Eigen::Index c = 0; c < var.size(); ++c)
        params.mat("feat.scale")(c, 0) = var[c] > 1e-24 ? 1.0 / std::sqrt(var[c]) : 1.0;
}

// ---------------------------------------------------------------------------
// Projector

ProjectorTape projector_forward(const ModelParams& params, const std::string& prefix,
                                const Eigen::Ref<const Eigen::VectorXd>& input) {
    ProjectorTape t;
    t.input = input;
    t.hidden_pre = params.mat(prefix + ".w1") * input + params.mat(prefix + ".b1").col(0);
    t.out = params.mat(prefix + ".w2") * softplus(t.hidden_pre) + params.mat(prefix + ".b2").col(0);
    check_finite(t.out, prefix);
    const double norm = t.out.norm();
    if (!(norm > 0.0)) throw NumericError("zero projector output in " + prefix);
    t.embedding = t.out / norm;
    return t;
}

Eigen::VectorXd projector_backward(const ModelParams& params, const std::string& prefix, const ProjectorTape& tape,
                                   const Eigen::Ref<const Eigen::VectorXd>& dembedding, ModelParams& grad) {
    const double norm = tape.out.norm();
    const Eigen::VectorXd& e = tape.embedding;
    const Eigen::VectorXd dout = (dembedding - e * e.dot(dembedding)) / norm;
    const Eigen::VectorXd hidden = softplus(tape.hidden_pre);
    grad.mat(prefix + ".w2").noalias() += dout * hidden.transpose();
    grad.mat(prefix + ".b2").col(0) += dout;
    const Eigen::VectorXd dhidden_pre =
        (params.mat(prefix + ".w2").transpose() * dout).cwiseProduct(sigmoid(tape.hidden_pre));
    grad.mat(prefix + ".w1").noalias() += dhidden_pre * tape.input.transpose();
    grad.mat(prefix + ".b1").col(0) += dhidden_pre;
    return params.mat(prefix + ".w1").transpose() * dhidden_pre;
}

// ---------------------------------------------------------------------------
// Text

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c) || c >= 0x80) {
            cur += static_cast<char>(std::tolower(c));
        } else if (!cur.empty()) {
            tokens.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) tokens.push_back(std::move(cur));
    return tokens;
}

std::size_t token_bucket(std::string_view token, int buckets) {
    return static_cast<std::size_t>(fnv1a64(token) % static_cast<std::uint64_t>(buckets));
}

Eigen::VectorXd bag_of_words(std::string_view text, int buckets) {
    Eigen::VectorXd bag = Eigen::VectorXd::Zero(buckets);
    auto tokens = tokenize(text);
    if (tokens.empty()) tokens.emplace_back("<empty>");
    for (const auto& t : tokens) bag[static_cast<Eigen::Index>(token_bucket(t, buckets))] += 1.0;
    return bag / bag.norm();
}

TextTape text_forward(const ModelParams& params, std::string_view report) {
    TextTape t;
    const auto w = params.mat("text.weight");
    t.bag = bag_of_words(report, static_cast<int>(w.cols()));
    t.hidden_pre = w * t.bag + params.mat("text.bias").col(0);
    t.features = softplus(t.hidden_pre);
    t.proj = projector_forward(params, "proj_text", t.features);
    return t;
}

void text_backward(const ModelParams& params, const TextTape& tape, const Eigen::Ref<const Eigen::VectorXd>& dembedding,
                   ModelParams& grad) {
    const Eigen::VectorXd dfeat = projector_backward(params, "proj_text", tape.proj, dembedding, grad);
    const Eigen::VectorXd dpre = dfeat.cwiseProduct(sigmoid(tape.hidden_pre));
    auto gw = grad.mat("text.weight");
    for (Eigen::Index j = 0; j < tape.bag.size(); ++j)
        if (tape.bag[j] != 0.0) gw.col(j) += dpre * tape.bag[j];
    grad.mat("text.bias").col(0) += dpre;
}

// ---------------------------------------------------------------------------

Embedding encode_signal(const ModelParams& params, const SignalTensor& tensor, const DropoutMask* mask) {
    tensor.validate();
    const auto trunk = trunk_forward(params, tensor.data.cast<double>());
    Eigen::VectorXd h = trunk.features;
    if (mask) {
        if (mask->scale.size() != h.size()) throw ShapeError("dropout mask size does not match encoder output");
        h = h.cwiseProduct(mask->scale);
    }
    return {projector_forward(params, "proj_ecg", h).embedding, true};
}

Embedding encode_text(const ModelParams& params, std::string_view report) {
    return {text_forward(params, report).proj.embedding, true};
}

std::pair<Embedding, Embedding> dropout_views(const ModelParams& params, const SignalTensor& tensor, double p,
                                              std::uint64_t seed) {
    if (!(p >= 0.0 && p < 1.0)) throw InvalidRate("dropout rate must be in [0, 1)");
    tensor.validate();
    const auto trunk = trunk_forward(params, tensor.data.cast<double>());
    Rng rng = make_rng(seed, 0xd80);
    const auto m1 = DropoutMask::draw(trunk.features.size(), p, rng, seed);
    const auto m2 = DropoutMask::draw(trunk.features.size(), p, rng, seed);
    return {Embedding{projector_forward(params, "proj_ecg", trunk.features.cwiseProduct(m1.scale)).embedding, true},
            Embedding{projector_forward(params, "proj_ecg", trunk.features.cwiseProduct(m2.scale)).embedding, true}};
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

std::string payload_bytes(const Eigen::VectorXd& v) {
    std::string out;
    out.reserve(static_cast<std::size_t>(v.size()) * 8);
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        auto bits = std::bit_cast<std::uint64_t>(v[i]);
        for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
    }
    return out;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    ckpt.params.validate();
    std::string layout;
    for (const auto& b : ckpt.params.layout())
        layout += (layout.empty() ? "" : ";") + b.name + ":" + std::to_string(b.rows) + ":" + std::to_string(b.cols);
    const std::string payload = payload_bytes(ckpt.params.values());
    std::string out = "ecgclip_checkpoint=1\n";
    out += "layout=" + layout + "\n";
    out += "n_values=" + std::to_string(ckpt.params.size()) + "\n";
    out += "checksum=" + hex64(fnv1a64(payload)) + "\n";
    for (const auto& [k, v] : ckpt.params.hyper()) out += "hyper." + k + "=" + std::to_string(v) + "\n";
    for (const auto& [k, v] : ckpt.meta) {
        if (v.find('\n') != std::string::npos || k.find('=') != std::string::npos)
            throw InvalidSpec("checkpoint metadata " + k + " is not single-line");
        out += "meta." + k + "=" + v + "\n";
    }
    out += "\n";
    out += payload;
    return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
    std::map<std::string, std::string> header;
    std::size_t pos = 0;
    while (true) {
        auto eol = bytes.find('\n', pos);
        if (eol == std::string_view::npos) throw FormatError("checkpoint header not terminated", pos);
        auto line = bytes.substr(pos, eol - pos);
        if (line.empty()) {
            pos = eol + 1;
            break;
        }
        auto eq = line.find('=');
        if (eq == std::string_view::npos) throw FormatError("malformed checkpoint header line", pos);
        header[std::string(line.substr(0, eq))] = std::string(line.substr(eq + 1));
        pos = eol + 1;
    }
    if (header["ecgclip_checkpoint"] != "1") throw FormatError("not a version-1 checkpoint", 0);

    Checkpoint ck;
    for (const auto& entry : split(header["layout"], ';')) {
        auto f = split(entry, ':');
        if (f.size() != 3) throw FormatError("malformed layout entry '" + entry + "'", 0);
        ck.params.add_block(f[0], std::stoll(f[1]), std::stoll(f[2]));
    }
    for (const auto& [k, v] : header) {
        if (k.rfind("hyper.", 0) == 0) ck.params.hyper()[k.substr(6)] = std::stoll(v);
        if (k.rfind("meta.", 0) == 0) ck.meta[k.substr(5)] = v;
    }
    const auto n = static_cast<std::size_t>(std::stoll(header["n_values"]));
    if (n != static_cast<std::size_t>(ck.params.size())) throw FormatError("layout does not match n_values", 0);
    if (bytes.size() - pos != n * 8) throw FormatError("checkpoint payload has wrong length", bytes.size());
    const auto payload = bytes.substr(pos);
    if (hex64(fnv1a64(payload)) != header["checksum"]) throw FormatError("checkpoint checksum mismatch", pos);
    const auto* p = reinterpret_cast<const unsigned char*>(payload.data());
    for (std::size_t i = 0; i < n; ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(p[8 * i + b]) << (8 * b);
        ck.params.values()[static_cast<Eigen::Index>(i)] = std::bit_cast<double>(bits);
    }
    ck.params.validate();
    return ck;
}

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path)); }

}  // namespace ecgclip
