#pragma once

// Logit lens, intermediate-value detection, attention-vs-MLP attribution,
// and the linear / logistic probes over residual-stream activations.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "arithlens/exprgen.hpp"
#include "arithlens/kernels.hpp"
#include "arithlens/model.hpp"
#include "arithlens/tracing.hpp"

namespace arithlens {

class AnalysisError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct TokenLogit {
    int token = 0;
    double logit = 0.0;
    friend bool operator==(const TokenLogit&, const TokenLogit&) = default;
};

/// The k largest logits, descending; equal logits are ordered by token id.
std::vector<TokenLogit> top_k(std::span<const double> logits, int k);

enum class Component { Attention, Mlp, Neither };
std::string_view component_name(Component c);

struct LensEntry {
    int layer = 0;
    CapturePoint point = CapturePoint::BlockInput;
    std::vector<TokenLogit> top;
};

struct LensReport {
    int n_layers = 0;
    int topk = 10;
    std::vector<LensEntry> entries;  // layer-major, capture points in declaration order
    std::optional<int> first_layer_top1;
    std::optional<Component> attribution;

    const LensEntry& at(int layer, CapturePoint point) const;
};

/// Projects the final-position residual of every (layer, point) through the
/// final norm and unembedding.
LensReport logit_lens(const ResidualCache& cache, const ModelBundle& model, int topk = 10);

struct Detection {
    int token = 0;                    // intermediate value token
    std::vector<bool> in_topk;        // per layer, post-MLP point
    std::vector<bool> is_top1;        // per layer, post-MLP point
    std::optional<int> first_layer_top1;
    bool degenerate = false;          // intermediate equals the final answer

    bool any() const;
};

Detection detect_intermediate(const LensReport& report, const Expression& expr);

/// Which residual addition at `layer` first makes the intermediate token the
/// top-1 lens prediction at the final position. `layer` must be the prompt's
/// first_layer_top1; anything else throws AnalysisError.
Component attribute_component(const ModelBundle& model, const Expression& expr, int layer);

enum class PositionSelector { Equals, FirstOperator, SecondOperator };
std::string_view position_selector_name(PositionSelector s);
PositionSelector position_selector_from_name(std::string_view name);

/// Token position a selector picks in a BOS-prefixed prompt.
int select_position(const Expression& expr, PositionSelector selector);

/// Residual vectors at (layer, point) for the given positions of each prompt,
/// computed in packed batches. Row i belongs to prompt i / positions.size().
struct ActivationRequest {
    int layer = 0;
    CapturePoint point = CapturePoint::BlockInput;
};
Matrix collect_activations(const ModelBundle& model, std::span<const Expression> prompts, ActivationRequest site,
                           const std::function<std::vector<int>(const Expression&)>& positions);

/// Evaluation-order label of each operator, two per prompt in appearance
/// order: 0 when the operator is evaluated first, 1 otherwise.
std::vector<int> precedence_labels(std::span<const Expression> prompts);

/// Both operator token positions of a prompt.
std::vector<int> operator_positions_of(const Expression& e);

enum class ProbeKind { LinearR2, LogisticAccuracy };

struct ProbeOptions {
    double ridge = 1e-4;
    double train_fraction = 0.8;
    std::uint64_t seed = 7;
    double tolerance = 1e-8;  // logistic Newton convergence on the step norm
    int max_iterations = 100;
};

struct ProbeReport {
    ProbeKind kind = ProbeKind::LinearR2;
    double metric = 0.0;  // R^2 or accuracy on the held-out split
    std::size_t n_train = 0;
    std::size_t n_test = 0;
    std::uint64_t seed = 0;
    int iterations = 0;  // Newton iterations for the logistic probe
    bool converged = true;
    std::optional<int> layer;
    std::optional<CapturePoint> point;
    std::string position;
};

/// Ridge-damped least squares with intercept; R^2 on the held-out split.
ProbeReport fit_linear_probe(ConstMatRef x, std::span<const double> y, const ProbeOptions& options = {});

/// Ridge-damped logistic regression (Newton with backtracking); accuracy on
/// the held-out split. Labels must be 0 or 1 and both must occur.
ProbeReport fit_logistic_probe(ConstMatRef x, std::span<const int> y, const ProbeOptions& options = {});

/// Per-layer detection rates over a prompt set.
struct DetectionCurve {
    std::vector<std::size_t> topk_count;  // per layer
    std::vector<std::size_t> top1_count;  // per layer
    std::size_t prompts = 0;
    std::size_t detected = 0;     // intermediate in top-k at some layer
    std::size_t attention = 0;    // attribution counts over prompts with a top-1 layer
    std::size_t mlp = 0;
    std::size_t neither = 0;
};
DetectionCurve detection_curve(const ModelBundle& model, std::span<const Expression> prompts, int topk = 10);

void write_lens_csv(std::ostream& out, const LensReport& report);
void write_detection_csv(std::ostream& out, const DetectionCurve& curve);
void write_probe_csv_header(std::ostream& out);
void write_probe_csv_row(std::ostream& out, const ProbeReport& report);

}  // namespace arithlens
