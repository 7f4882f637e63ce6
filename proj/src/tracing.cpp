#include "arithlens/tracing.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "arithlens/model.hpp"

namespace arithlens {

std::string_view capture_point_name(CapturePoint p) {
    switch (p) {
        case CapturePoint::BlockInput: return "block_input";
        case CapturePoint::PostAttention: return "post_attention";
        case CapturePoint::PostMlp: return "post_mlp";
    }
    return "?";
}

void validate_hooks(std::span<const HookSpec> hooks, const ModelConfig& config, std::size_t seq_len) {
    for (const auto& hook : hooks) {
        if (const auto* ab = std::get_if<AblateAttention>(&hook)) {
            if (ab->layer < 0 || ab->layer >= config.n_layers) {
                throw HookError("AblateAttention: layer " + std::to_string(ab->layer) + " out of range");
            }
            continue;
        }
        const auto& sw = std::get<SwapDims>(hook);
        const auto len = static_cast<int>(seq_len);
        if (sw.pos1 < 0 || sw.pos1 >= len || sw.pos2 < 0 || sw.pos2 >= len) {
            throw HookError("SwapDims: position out of range");
        }
        if (sw.pos1 == sw.pos2) throw HookError("SwapDims: pos1 and pos2 must differ");
        for (int dim : sw.dims) {
            if (dim < 0 || dim >= config.d_model) {
                throw HookError("SwapDims: dimension " + std::to_string(dim) + " out of range");
            }
        }
    }
}

bool attention_ablated(std::span<const HookSpec> hooks, int layer) {
    return std::ranges::any_of(hooks, [layer](const HookSpec& h) {
        const auto* ab = std::get_if<AblateAttention>(&h);
        return ab != nullptr && ab->layer == layer;
    });
}

void apply_swaps(std::span<const HookSpec> hooks, SwapSite site, MatRef state) {
    for (const auto& hook : hooks) {
        const auto* sw = std::get_if<SwapDims>(&hook);
        if (sw == nullptr || sw->site != site) continue;
        double* r1 = state.row(static_cast<std::size_t>(sw->pos1));
        double* r2 = state.row(static_cast<std::size_t>(sw->pos2));
        for (int dim : sw->dims) std::swap(r1[dim], r2[dim]);
    }
}

ResidualCache::ResidualCache(int n_layers, int seq_len, int d_model)
    : n_layers_(n_layers),
      seq_len_(seq_len),
      d_model_(d_model),
      stream_(static_cast<std::size_t>(n_layers * kCapturePoints * seq_len * d_model), 0.0),
      attn_(static_cast<std::size_t>(n_layers * seq_len * d_model), 0.0),
      mlp_(static_cast<std::size_t>(n_layers * seq_len * d_model), 0.0) {}

std::size_t ResidualCache::stream_index(int layer, CapturePoint point, int pos) const {
    if (layer < 0 || layer >= n_layers_ || pos < 0 || pos >= seq_len_) {
        throw std::out_of_range("ResidualCache: index out of range");
    }
    const auto p = static_cast<int>(point);
    return static_cast<std::size_t>(((layer * kCapturePoints + p) * seq_len_ + pos) * d_model_);
}

std::size_t ResidualCache::component_index(int layer, int pos) const {
    if (layer < 0 || layer >= n_layers_ || pos < 0 || pos >= seq_len_) {
        throw std::out_of_range("ResidualCache: index out of range");
    }
    return static_cast<std::size_t>((layer * seq_len_ + pos) * d_model_);
}

std::span<const double> ResidualCache::at(int layer, CapturePoint point, int pos) const {
    return {stream_.data() + stream_index(layer, point, pos), static_cast<std::size_t>(d_model_)};
}

std::span<double> ResidualCache::at(int layer, CapturePoint point, int pos) {
    return {stream_.data() + stream_index(layer, point, pos), static_cast<std::size_t>(d_model_)};
}

std::span<const double> ResidualCache::attention_output(int layer, int pos) const {
    return {attn_.data() + component_index(layer, pos), static_cast<std::size_t>(d_model_)};
}

std::span<double> ResidualCache::attention_output(int layer, int pos) {
    return {attn_.data() + component_index(layer, pos), static_cast<std::size_t>(d_model_)};
}

std::span<const double> ResidualCache::mlp_output(int layer, int pos) const {
    return {mlp_.data() + component_index(layer, pos), static_cast<std::size_t>(d_model_)};
}

std::span<double> ResidualCache::mlp_output(int layer, int pos) {
    return {mlp_.data() + component_index(layer, pos), static_cast<std::size_t>(d_model_)};
}

Matrix ResidualCache::site(int layer, CapturePoint point) const {
    Matrix out(static_cast<std::size_t>(seq_len_), static_cast<std::size_t>(d_model_));
    for (int p = 0; p < seq_len_; ++p) std::ranges::copy(at(layer, point, p), out.row(static_cast<std::size_t>(p)).begin());
    return out;
}

bool ResidualCache::all_finite() const {
    const auto finite = [](double v) { return std::isfinite(v); };
    return std::ranges::all_of(stream_, finite) && std::ranges::all_of(attn_, finite) &&
           std::ranges::all_of(mlp_, finite);
}

void ResidualCache::write_csv(std::ostream& out) const {
    out << "layer,point,position";
    for (int j = 0; j < d_model_; ++j) out << ",v" << j;
    out << '\n';
    const auto old = out.precision(17);
    for (int l = 0; l < n_layers_; ++l) {
        for (CapturePoint point : kAllCapturePoints) {
            for (int p = 0; p < seq_len_; ++p) {
                out << l << ',' << capture_point_name(point) << ',' << p;
                for (double v : at(l, point, p)) out << ',' << v;
                out << '\n';
            }
        }
    }
    out.precision(old);
}

ResidualCache capture(const ModelBundle& model, std::string_view prompt) {
    const auto tokens = tokenize(prompt);
    auto result = forward(model, tokens, {}, true);
    return std::move(*result.cache);
}

}  // namespace arithlens
