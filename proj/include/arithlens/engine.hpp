#pragma once

// Packed-batch forward pass that records every intermediate activation,
// and the matching reverse pass. Sequences of different lengths are stacked
// row-wise; attention is computed per sequence over its own row range.

#include <cstddef>
#include <span>
#include <vector>

#include "arithlens/kernels.hpp"
#include "arithlens/model.hpp"
#include "arithlens/tracing.hpp"

namespace arithlens::engine {

struct Batch {
    std::vector<int> tokens;
    std::vector<std::size_t> offsets{0};  // sequence s occupies rows [offsets[s], offsets[s+1])

    void add(std::span<const int> seq);
    std::size_t rows() const { return tokens.size(); }
    std::size_t sequences() const { return offsets.size() - 1; }
    std::size_t length(std::size_t s) const { return offsets[s + 1] - offsets[s]; }
};

struct LayerTape {
    Matrix x_in;      // block input
    Matrix n1;        // normed input to attention
    Matrix q, k, v;   // q and k after the rotary map
    Matrix ctx;       // attention-weighted values, heads concatenated
    Matrix attn_out;  // output projection; zero when ablated
    Matrix x_mid;     // post-attention residual
    Matrix n2;
    Matrix h_pre, h_act;
    Matrix mlp_out;
    std::vector<double> inv_rms1, inv_rms2;
    std::vector<double> probs;  // per sequence, per head, (len x len) row-major
    bool ablated = false;
};

struct Tape {
    std::vector<LayerTape> layers;
    Matrix x_final;  // post-MLP residual of the last layer
    Matrix nf;       // after final normalization
    std::vector<double> inv_rms_f;
    Matrix logits;
    int start_layer = 0;
};

/// Forward over a packed batch. When `start_input` is given, layers before
/// `start_layer` are skipped and `start_input` is used as the block input.
void forward_batch(const ModelBundle& model, const Batch& batch, std::span<const HookSpec> hooks, Tape& tape,
                   int start_layer = 0, const Matrix* start_input = nullptr);

/// Mean next-token cross-entropy over rows whose target is >= 0.
double cross_entropy(const Tape& tape, std::span<const int> targets);

/// Runs forward and backward for a hook-free batch. Adds dLoss/dParams into
/// `grad` (same layout as the parameters) and returns the mean loss.
double loss_and_grad(const ModelBundle& model, const Batch& batch, std::span<const int> targets, Tape& tape,
                     std::span<double> grad);

/// Rotary map on one head vector at position `pos`; `inverse` applies the transpose.
void rotate(std::span<double> x, int pos, double base, bool inverse);

}  // namespace arithlens::engine
