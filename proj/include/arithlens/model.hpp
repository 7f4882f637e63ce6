#pragma once

// Small decoder-only transformer: pre-norm (RMSNorm) blocks with rotary
// multi-head causal attention and a GELU MLP, untied unembedding.
// Token embeddings carry no positional information; positions enter only
// through the rotary map inside attention.

#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "arithlens/kernels.hpp"
#include "arithlens/tracing.hpp"
#include "arithlens/vocab.hpp"

namespace arithlens {

struct ModelConfig {
    int n_layers = 6;
    int d_model = 128;
    int n_heads = 4;
    int d_ff = 512;
    int max_seq = 16;
    int vocab_size = vocab::kSize;
    double rope_base = 10000.0;
    std::uint64_t seed = 1234;

    int head_dim() const { return d_model / n_heads; }
    /// Throws std::invalid_argument when the shape is inconsistent.
    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TensorInfo {
    std::string name;
    std::vector<std::size_t> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
};

/// Named tensors packed into one flat parameter vector.
class ParameterLayout {
public:
    static ParameterLayout for_config(const ModelConfig& config);

    const std::vector<TensorInfo>& tensors() const { return tensors_; }
    std::size_t total() const { return total_; }
    const TensorInfo& find(std::string_view name) const;

private:
    void add(std::string name, std::vector<std::size_t> shape);

    std::vector<TensorInfo> tensors_;
    std::size_t total_ = 0;
};

struct TrainingMeta {
    std::uint64_t dataset_hash = 0;
    std::int64_t steps = 0;
    double heldout_accuracy = std::numeric_limits<double>::quiet_NaN();
};

class ModelBundle {
public:
    /// All parameters zero.
    explicit ModelBundle(const ModelConfig& config);
    /// Random initialization seeded by config.seed.
    static ModelBundle initialized(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    const ParameterLayout& layout() const { return layout_; }
    std::span<double> parameters() { return params_; }
    std::span<const double> parameters() const { return params_; }

    MatRef tensor(std::string_view name);
    ConstMatRef tensor(std::string_view name) const;

    struct LayerParams {
        std::size_t attn_norm, wq, wk, wv, wo, mlp_norm, w1, w2;
    };
    const LayerParams& layer_offsets(int layer) const { return layer_offsets_[static_cast<std::size_t>(layer)]; }
    std::size_t embedding_offset() const { return embedding_; }
    std::size_t final_norm_offset() const { return final_norm_; }
    std::size_t unembedding_offset() const { return unembedding_; }

    TrainingMeta meta;

    friend bool operator==(const ModelBundle& a, const ModelBundle& b) {
        return a.config_ == b.config_ && a.params_ == b.params_;
    }

private:
    ModelConfig config_;
    ParameterLayout layout_;
    std::vector<double> params_;
    std::vector<LayerParams> layer_offsets_;
    std::size_t embedding_ = 0, final_norm_ = 0, unembedding_ = 0;
};

struct ForwardResult {
    Matrix logits;  // seq_len x vocab
    std::optional<ResidualCache> cache;
};

ForwardResult forward(const ModelBundle& model, std::span<const int> tokens, std::span<const HookSpec> hooks = {},
                      bool capture = false);

/// Runs layers [layer, n_layers) starting from a given block input
/// (seq_len x d_model). The returned cache only fills layers >= `layer`.
ForwardResult forward_from_layer(const ModelBundle& model, int layer, ConstMatRef block_input,
                                 std::span<const HookSpec> hooks = {}, bool capture = false);

/// Final normalization followed by the unembedding. The forward pass uses
/// this same routine for its output logits.
std::vector<double> unembed(const ModelBundle& model, std::span<const double> residual);

/// Index of the largest value; ties go to the lowest index.
int argmax(std::span<const double> values);

/// Argmax over the final-position logits of a canonical prompt.
int predict_answer(const ModelBundle& model, std::string_view prompt);

}  // namespace arithlens
