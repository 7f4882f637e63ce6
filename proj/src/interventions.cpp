#include "arithlens/interventions.hpp"

#include <algorithm>
#include <ostream>

#include "arithlens/analysis.hpp"
#include "arithlens/vocab.hpp"

namespace arithlens {

namespace {

struct PromptOutcome {
    bool correct = false;
    bool detected = false;
};

PromptOutcome run_prompt(const ModelBundle& model, const Expression& e, std::span<const HookSpec> hooks, int topk) {
    const auto tokens = tokenize(e.text);
    auto result = forward(model, tokens, hooks, true);
    PromptOutcome out;
    out.correct = argmax(result.logits.row(result.logits.rows() - 1)) == e.final_value;
    out.detected = detect_intermediate(logit_lens(*result.cache, model, topk), e).any();
    return out;
}

std::vector<double> final_logits(const ModelBundle& model, const SwapExperiment& exp, std::vector<int> dims) {
    const auto tokens = tokenize(exp.prompt.text);
    const std::vector<HookSpec> hooks{SwapDims{exp.pos1, exp.pos2, std::move(dims), exp.site}};
    const auto result = forward(model, tokens, hooks);
    const auto row = result.logits.row(result.logits.rows() - 1);
    return {row.begin(), row.end()};
}

}  // namespace

AblationReport ablate_attention_sweep(const ModelBundle& model, std::span<const Expression> prompts, int topk) {
    const int layers = model.config().n_layers;
    const auto n = prompts.size();
    // Slot 0 is the unhooked baseline; slot L + 1 ablates layer L.
    const auto slots = static_cast<std::size_t>(layers + 1);
    std::vector<PromptOutcome> outcomes(n * slots);
    const auto jobs = static_cast<std::ptrdiff_t>(n * slots);
#pragma omp parallel for schedule(dynamic, 4)
    for (std::ptrdiff_t job = 0; job < jobs; ++job) {
        const auto i = static_cast<std::size_t>(job) / slots;
        const auto slot = static_cast<int>(static_cast<std::size_t>(job) % slots);
        std::vector<HookSpec> hooks;
        if (slot > 0) hooks.emplace_back(AblateAttention{slot - 1});
        outcomes[static_cast<std::size_t>(job)] = run_prompt(model, prompts[i], hooks, topk);
    }

    AblationReport report;
    report.prompts = n;
    std::vector<std::size_t> correct(slots, 0), detected(slots, 0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t s = 0; s < slots; ++s) {
            correct[s] += outcomes[i * slots + s].correct ? 1 : 0;
            detected[s] += outcomes[i * slots + s].detected ? 1 : 0;
        }
    }
    const auto rate = [n](std::size_t c) { return n == 0 ? 0.0 : static_cast<double>(c) / static_cast<double>(n); };
    report.baseline_accuracy = rate(correct[0]);
    report.baseline_detections = detected[0];
    for (std::size_t s = 1; s < slots; ++s) {
        report.accuracy.push_back(rate(correct[s]));
        report.detections.push_back(detected[s]);
    }
    return report;
}

std::string_view target_kind_name(TargetKind k) {
    return k == TargetKind::SwappedPrecedence ? "swapped-precedence" : "exchanged-prompt";
}

SwapExperiment make_swap_experiment(const Expression& prompt, TargetKind kind, SwapSite site) {
    if (!is_no_paren(prompt.variant)) throw InterventionError("swap experiment needs a prompt without parentheses");
    if (!prompt.valid) throw InterventionError("swap experiment needs a valid prompt");
    std::optional<std::int64_t> target;
    if (kind == TargetKind::SwappedPrecedence) {
        target = prompt.swapped_final;
    } else if (const auto other = exchanged_prompt(prompt)) {
        target = other->final_value;
    }
    if (!target) throw InterventionError("target value is undefined for '" + prompt.text + "'");
    const auto t_target = vocab::integer_token(*target);
    const auto t_real = vocab::integer_token(prompt.final_value);
    if (!t_target || !t_real) throw InterventionError("answer value has no token for '" + prompt.text + "'");
    if (*t_target == *t_real) throw InterventionError("target equals the real answer for '" + prompt.text + "'");
    const auto pos = prompt.operator_positions();
    return {prompt, pos[0], pos[1], *t_target, *t_real, kind, site};
}

ContributionRanking dim_contributions(const ModelBundle& model, const SwapExperiment& exp) {
    const auto baseline = final_logits(model, exp, {});
    if (argmax(baseline) != exp.t_real) {
        throw InterventionError("model does not predict the real answer for '" + exp.prompt.text + "'");
    }
    const int d = model.config().d_model;
    const auto target = static_cast<std::size_t>(exp.t_target);
    ContributionRanking ranking;
    ranking.baseline_target_logit = baseline[target];
    ranking.entries.resize(static_cast<std::size_t>(d));
#pragma omp parallel for schedule(static)
    for (int e = 0; e < d; ++e) {
        const auto patched = final_logits(model, exp, {e});
        ranking.entries[static_cast<std::size_t>(e)] = {e, patched[target] - baseline[target]};
    }
    std::ranges::stable_sort(ranking.entries, [](const DimContribution& a, const DimContribution& b) {
        return a.delta_logit > b.delta_logit;
    });
    return ranking;
}

PatchResult cumulative_patch(const ModelBundle& model, const SwapExperiment& exp, const ContributionRanking& ranking) {
    const auto d = ranking.entries.size();
    if (d != static_cast<std::size_t>(model.config().d_model)) {
        throw InterventionError("ranking does not cover every model dimension");
    }
    PatchResult result;
    result.trace.resize(d);
#pragma omp parallel for schedule(dynamic, 4)
    for (std::ptrdiff_t kk = 1; kk <= static_cast<std::ptrdiff_t>(d); ++kk) {
        std::vector<int> dims;
        for (std::ptrdiff_t j = 0; j < kk; ++j) dims.push_back(ranking.entries[static_cast<std::size_t>(j)].dim);
        const auto logits = final_logits(model, exp, std::move(dims));
        const int top = argmax(logits);
        result.trace[static_cast<std::size_t>(kk - 1)] = {static_cast<int>(kk), logits[static_cast<std::size_t>(exp.t_target)],
                                                          logits[static_cast<std::size_t>(exp.t_real)],
                                                          logits[static_cast<std::size_t>(top)], top};
    }
    for (const auto& step : result.trace) {
        if (step.top_token == exp.t_target) {
            result.minimal_k = step.k;
            break;
        }
    }
    return result;
}

void write_ablation_csv(std::ostream& out, const AblationReport& report) {
    out << "layer,accuracy,detection_count,prompts\n";
    const auto old = out.precision(17);
    out << "baseline," << report.baseline_accuracy << ',' << report.baseline_detections << ',' << report.prompts << '\n';
    for (std::size_t l = 0; l < report.accuracy.size(); ++l) {
        out << l << ',' << report.accuracy[l] << ',' << report.detections[l] << ',' << report.prompts << '\n';
    }
    out.precision(old);
}

void write_contributions_csv(std::ostream& out, const ContributionRanking& ranking) {
    out << "rank,dim,delta_logit\n";
    const auto old = out.precision(17);
    for (std::size_t r = 0; r < ranking.entries.size(); ++r) {
        out << r + 1 << ',' << ranking.entries[r].dim << ',' << ranking.entries[r].delta_logit << '\n';
    }
    out.precision(old);
}

void write_patch_csv(std::ostream& out, const PatchResult& result) {
    out << "k,swapped_logit,real_logit,top_logit,top_token\n";
    const auto old = out.precision(17);
    for (const auto& s : result.trace) {
        out << s.k << ',' << s.target_logit << ',' << s.real_logit << ',' << s.top_logit << ','
            << vocab::lexeme(s.top_token) << '\n';
    }
    out.precision(old);
}

}  // namespace arithlens
