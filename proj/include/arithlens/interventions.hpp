#pragma once

// Attention-ablation sweeps and the partial embedding swap experiments:
// per-dimension contribution ranking and cumulative dimension patching.

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "arithlens/exprgen.hpp"
#include "arithlens/model.hpp"
#include "arithlens/tracing.hpp"

namespace arithlens {

class InterventionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct AblationReport {
    std::size_t prompts = 0;
    double baseline_accuracy = 0.0;
    std::size_t baseline_detections = 0;
    std::vector<double> accuracy;          // per ablated layer
    std::vector<std::size_t> detections;   // per ablated layer: intermediate in top-k at any layer
};

/// One forward per (prompt, layer) with that layer's attention output zeroed.
/// The prompts are expected to be ones the model answers correctly.
AblationReport ablate_attention_sweep(const ModelBundle& model, std::span<const Expression> prompts, int topk = 10);

enum class TargetKind {
    SwappedPrecedence,  // value of the prompt with its evaluation order reversed
    ExchangedPrompt,    // answer to the prompt with its operator tokens exchanged
};
std::string_view target_kind_name(TargetKind k);

struct SwapExperiment {
    Expression prompt;
    int pos1 = 0;  // first operator token position (BOS-prefixed)
    int pos2 = 0;
    int t_target = 0;
    int t_real = 0;
    TargetKind target_kind = TargetKind::SwappedPrecedence;
    SwapSite site = SwapSite::BlockInput;
};

/// Throws InterventionError unless the prompt has no parentheses, the target
/// value exists as a token, and the target differs from the real answer.
SwapExperiment make_swap_experiment(const Expression& prompt, TargetKind kind = TargetKind::SwappedPrecedence,
                                    SwapSite site = SwapSite::BlockInput);

struct DimContribution {
    int dim = 0;
    double delta_logit = 0.0;
};

struct ContributionRanking {
    std::vector<DimContribution> entries;  // descending delta; ties by lower dim
    double baseline_target_logit = 0.0;
};

/// Swaps one dimension at a time between the operator positions and records
/// the change of the target logit at the final position. Throws
/// InterventionError when the unpatched prediction is not t_real.
ContributionRanking dim_contributions(const ModelBundle& model, const SwapExperiment& exp);

struct PatchStep {
    int k = 0;
    double target_logit = 0.0;
    double real_logit = 0.0;
    double top_logit = 0.0;
    int top_token = 0;
};

struct PatchResult {
    std::optional<int> minimal_k;
    std::vector<PatchStep> trace;  // k = 1 .. d_model
};

/// Swaps the top-k ranked dimensions for every k and records the logits.
PatchResult cumulative_patch(const ModelBundle& model, const SwapExperiment& exp, const ContributionRanking& ranking);

void write_ablation_csv(std::ostream& out, const AblationReport& report);
void write_contributions_csv(std::ostream& out, const ContributionRanking& ranking);
void write_patch_csv(std::ostream& out, const PatchResult& result);

}  // namespace arithlens
