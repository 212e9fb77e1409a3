#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ecgclip/signal.hpp"
#include "ecgclip/util.hpp"

namespace ecgclip {

struct EncoderConfig {
    int in_leads = 8;
    std::vector<int> channels = {8, 16, 32};  // output channels of the conv blocks
    int kernel = 7;
    int stride = 4;
    int proj_hidden = 64;
    int embed_dim = 64;
    int text_buckets = 1024;
    int text_hidden = 32;

    int feature_dim() const { return channels.back(); }
};

// Named view into the flat parameter vector. Blocks are column-major [rows x cols].
struct ParamBlock {
    std::string name;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    Eigen::Index offset = 0;

    Eigen::Index size() const { return rows * cols; }
    bool operator==(const ParamBlock&) const = default;
};

// All trainable weights as one flat float64 vector plus a layout descriptor. A
// gradient buffer is simply another ModelParams with the same layout.
class ModelParams {
public:
    ModelParams() = default;

    void add_block(const std::string& name, Eigen::Index rows, Eigen::Index cols);
    bool has(const std::string& name) const { return index_.count(name) > 0; }
    const ParamBlock& block(const std::string& name) const;
    const std::vector<ParamBlock>& layout() const { return layout_; }

    Eigen::Map<Eigen::MatrixXd> mat(const std::string& name);
    Eigen::Map<const Eigen::MatrixXd> mat(const std::string& name) const;

    Eigen::VectorXd& values() { return values_; }
    const Eigen::VectorXd& values() const { return values_; }
    Eigen::Index size() const { return values_.size(); }

    ModelParams zeros_like() const;
    void validate() const;  // layout total == flat length, all finite

    // Integer architecture attributes that cannot be read off the layout (e.g. conv stride).
    std::map<std::string, long long>& hyper() { return hyper_; }
    const std::map<std::string, long long>& hyper() const { return hyper_; }

    bool operator==(const ModelParams& o) const {
        return layout_ == o.layout_ && values_ == o.values_ && hyper_ == o.hyper_;
    }

private:
    std::map<std::string, long long> hyper_;
    std::vector<ParamBlock> layout_;
    std::map<std::string, std::size_t> index_;
    Eigen::VectorXd values_;
};

struct Embedding {
    Eigen::VectorXd values;
    bool normalized = true;
};

// Inverted dropout: entries are 0 or 1/(1-p).
struct DropoutMask {
    Eigen::VectorXd scale;
    double p = 0.0;
    std::uint64_t seed = 0;

    static DropoutMask draw(Eigen::Index dim, double p, Rng& rng, std::uint64_t seed = 0);
};

ModelParams init_model(const EncoderConfig& config, std::uint64_t seed);

// Reads the architecture back out of a parameter layout.
EncoderConfig config_from_layout(const ModelParams& params);

// ---------------------------------------------------------------------------
// Signal trunk: conv blocks (conv -> per-channel scale/shift -> softplus), then
// global average pooling. Produces the encoder feature vector f_ecg(x).

struct ConvTape {
    Eigen::MatrixXd patches;  // [C_in*K x L_out]
    Eigen::MatrixXd pre;      // pre-activation after scale/shift
    Eigen::MatrixXd conv;     // raw conv output (before scale/shift)
    Eigen::Index in_len = 0;
};

// features = (mean-pooled last activation - feat.center) * feat.scale
struct TrunkTape {
    std::vector<ConvTape> layers;
    Eigen::VectorXd pooled;
    Eigen::VectorXd features;
};

TrunkTape trunk_forward(const ModelParams& params, const Eigen::Ref<const Eigen::MatrixXd>& x);
// Accumulates parameter gradients into grad; if dx is non-null it receives d/dx.
void trunk_backward(const ModelParams& params, const TrunkTape& tape, const Eigen::Ref<const Eigen::VectorXd>& dfeatures,
                    ModelParams& grad, Eigen::MatrixXd* dx = nullptr);

// Sets feat.center / feat.scale to the mean and inverse spread of the pooled
// features over `inputs`; channels with no spread keep scale 1.
void calibrate_feature_norm(ModelParams& params, const std::vector<SignalTensor>& inputs, std::size_t workers = 1);

// ---------------------------------------------------------------------------
// Projector g: affine -> softplus -> affine -> L2 normalisation. prefix is
// "proj_ecg" or "proj_text".

struct ProjectorTape {
    Eigen::VectorXd input;
    Eigen::VectorXd hidden_pre;
    Eigen::VectorXd out;  // before normalisation
    Eigen::VectorXd embedding;
};

ProjectorTape projector_forward(const ModelParams& params, const std::string& prefix, const Eigen::Ref<const Eigen::VectorXd>& input);
// Returns d/dinput; accumulates parameter gradients.
Eigen::VectorXd projector_backward(const ModelParams& params, const std::string& prefix, const ProjectorTape& tape,
                                   const Eigen::Ref<const Eigen::VectorXd>& dembedding, ModelParams& grad);

// ---------------------------------------------------------------------------
// Toy text encoder: lowercase tokens hashed into a fixed bag (frozen), then a
// trainable affine + softplus tail, then the text projector.

std::vector<std::string> tokenize(std::string_view text);
std::size_t token_bucket(std::string_view token, int buckets);
// L2-normalised bucket counts; an empty report maps to a reserved token.
Eigen::VectorXd bag_of_words(std::string_view text, int buckets);

struct TextTape {
    Eigen::VectorXd bag;
    Eigen::VectorXd hidden_pre;
    Eigen::VectorXd features;
    ProjectorTape proj;
};

TextTape text_forward(const ModelParams& params, std::string_view report);
void text_backward(const ModelParams& params, const TextTape& tape, const Eigen::Ref<const Eigen::VectorXd>& dembedding,
                   ModelParams& grad);

// ---------------------------------------------------------------------------
// Public encoding operations.

Embedding encode_signal(const ModelParams& params, const SignalTensor& tensor, const DropoutMask* mask = nullptr);
Embedding encode_text(const ModelParams& params, std::string_view report);
// Two dropout views of the encoder output, masks drawn from one seeded stream.
std::pair<Embedding, Embedding> dropout_views(const ModelParams& params, const SignalTensor& tensor, double p,
                                              std::uint64_t seed);

// ---------------------------------------------------------------------------
// Checkpoint: text header (layout + checksum + metadata), blank line, float64 LE payload.

struct Checkpoint {
    ModelParams params;
    std::map<std::string, std::string> meta;  // e.g. tasks, iteration, score
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::string_view bytes);
void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace ecgclip
