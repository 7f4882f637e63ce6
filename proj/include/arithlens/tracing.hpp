#pragma once

// Declarative interventions on the forward pass and the residual-stream cache.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string_view>
#include <variant>
#include <vector>

#include "arithlens/kernels.hpp"

namespace arithlens {

struct ModelConfig;
class ModelBundle;

enum class CapturePoint : std::uint8_t { BlockInput, PostAttention, PostMlp };
inline constexpr int kCapturePoints = 3;
inline constexpr CapturePoint kAllCapturePoints[] = {CapturePoint::BlockInput, CapturePoint::PostAttention,
                                                     CapturePoint::PostMlp};

std::string_view capture_point_name(CapturePoint p);

/// Zero the attention output of one layer before it is added to the residual.
struct AblateAttention {
    int layer = 0;
};

/// Where a dimension swap is applied. Both sites belong to layer 0.
enum class SwapSite : std::uint8_t {
    BlockInput,     // token embeddings, before layer 0 computes
    PostAttention,  // residual after layer 0's attention addition
};

/// Exchange the listed dimensions between two token positions.
struct SwapDims {
    int pos1 = 0;
    int pos2 = 0;
    std::vector<int> dims;
    SwapSite site = SwapSite::BlockInput;
};

using HookSpec = std::variant<AblateAttention, SwapDims>;

class HookError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Throws HookError for an out-of-range layer, position or dimension, or pos1 == pos2.
void validate_hooks(std::span<const HookSpec> hooks, const ModelConfig& config, std::size_t seq_len);

bool attention_ablated(std::span<const HookSpec> hooks, int layer);

/// Applies every SwapDims hook registered at `site` to a (seq_len x d_model) state.
void apply_swaps(std::span<const HookSpec> hooks, SwapSite site, MatRef state);

/// Activations of one forward pass over one sequence, indexed by
/// (layer, capture point, position), plus the raw per-layer attention and
/// MLP outputs that were added to the stream.
class ResidualCache {
public:
    ResidualCache() = default;
    ResidualCache(int n_layers, int seq_len, int d_model);

    int n_layers() const { return n_layers_; }
    int seq_len() const { return seq_len_; }
    int d_model() const { return d_model_; }

    std::span<const double> at(int layer, CapturePoint point, int pos) const;
    std::span<double> at(int layer, CapturePoint point, int pos);
    std::span<const double> attention_output(int layer, int pos) const;
    std::span<double> attention_output(int layer, int pos);
    std::span<const double> mlp_output(int layer, int pos) const;
    std::span<double> mlp_output(int layer, int pos);

    /// (seq_len x d_model) copy of one capture site.
    Matrix site(int layer, CapturePoint point) const;

    bool all_finite() const;

    /// Columnar text dump: "layer,point,position,v0,...,v{d-1}" per row.
    void write_csv(std::ostream& out) const;

    friend bool operator==(const ResidualCache&, const ResidualCache&) = default;

private:
    std::size_t stream_index(int layer, CapturePoint point, int pos) const;
    std::size_t component_index(int layer, int pos) const;

    int n_layers_ = 0;
    int seq_len_ = 0;
    int d_model_ = 0;
    std::vector<double> stream_;
    std::vector<double> attn_;
    std::vector<double> mlp_;
};

/// One capture pass over a canonical prompt.
ResidualCache capture(const ModelBundle& model, std::string_view prompt);

}  // namespace arithlens
