#include <doctest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "arithlens/interventions.hpp"
#include "arithlens/train.hpp"
#include "reference.hpp"

using namespace arithlens;

namespace {

std::vector<Expression> no_paren_sample(std::size_t n) {
    std::vector<Expression> out;
    const auto all = enumerate_default_dataset();
    for (std::size_t i = 0; out.size() < n && i < all.size(); i += 53) {
        if (is_no_paren(all[i].variant)) out.push_back(all[i]);
    }
    return out;
}

// A two-layer model that has memorized the answers of a small prompt set, so
// that swap experiments have a correctly answered baseline.
const ModelBundle& memorized_model() {
    static const ModelBundle model = [] {
        auto cfg = reference::small_config(8);
        cfg.d_model = 32;
        cfg.d_ff = 64;
        TrainConfig c;
        c.lr = 1e-2;
        c.steps = 1500;
        c.split_fraction = 0.999;
        c.weight_decay = 0.0;
        c.warmup_steps = 50;
        return train(ModelBundle::initialized(cfg), no_paren_sample(32), c).model;
    }();
    return model;
}

std::vector<SwapExperiment> usable_experiments(const ModelBundle& m) {
    std::vector<SwapExperiment> out;
    for (const auto& e : correct_subset(m, no_paren_sample(32))) {
        try {
            out.push_back(make_swap_experiment(e));
        } catch (const InterventionError&) {
        }
    }
    return out;
}

}  // namespace

TEST_SUITE("interventions") {

TEST_CASE("swap experiment construction") {
    const auto e = expression_from_text("3 + 4 * 5 = ");
    const auto x = make_swap_experiment(e);
    CHECK(x.pos1 == 2);
    CHECK(x.pos2 == 4);
    CHECK(x.t_real == 23);
    CHECK(x.t_target == 35);
    const auto y = make_swap_experiment(e, TargetKind::ExchangedPrompt);
    CHECK(y.t_target == 17);
    CHECK(target_kind_name(y.target_kind) == "exchanged-prompt");

    CHECK_THROWS_AS(make_swap_experiment(expression_from_text("( 3 + 4 ) * 5 = ")), InterventionError);
    // (1 * 1) + 1 and 1 * (1 + 1) agree, so there is nothing to flip toward
    CHECK_THROWS_AS(make_swap_experiment(expression_from_text("1 * 1 + 1 = ")), InterventionError);
    // reversed order divides by 2 - 2
    CHECK_THROWS_AS(make_swap_experiment(expression_from_text("4 / 2 - 2 = ")), InterventionError);
}

TEST_CASE("swapping dimensions between identical tokens contributes nothing") {
    const auto& m = memorized_model();
    const auto e = expression_from_text("3 + 3 * 2 = ");
    SwapExperiment x;
    x.prompt = e;
    x.pos1 = 1;
    x.pos2 = 3;
    x.t_real = predict_answer(m, e.text);
    x.t_target = x.t_real == 12 ? 9 : 12;
    const auto ranking = dim_contributions(m, x);
    REQUIRE(ranking.entries.size() == 32);
    for (const auto& c : ranking.entries) CHECK(c.delta_logit == 0.0);
    for (std::size_t i = 0; i < 32; ++i) CHECK(ranking.entries[i].dim == static_cast<int>(i));
}

TEST_CASE("contribution ranking and cumulative patching") {
    const auto& m = memorized_model();
    const auto experiments = usable_experiments(m);
    REQUIRE(experiments.size() >= 3);
    for (std::size_t n = 0; n < 3; ++n) {
        const auto& x = experiments[n];
        CAPTURE(x.prompt.text);
        const auto ranking = dim_contributions(m, x);
        REQUIRE(ranking.entries.size() == 32);
        std::set<int> dims;
        for (std::size_t i = 0; i < 32; ++i) {
            dims.insert(ranking.entries[i].dim);
            if (i > 0) CHECK(ranking.entries[i - 1].delta_logit >= ranking.entries[i].delta_logit);
        }
        CHECK(dims.size() == 32);

        const auto patch = cumulative_patch(m, x, ranking);
        REQUIRE(patch.trace.size() == 32);
        std::optional<int> first;
        for (std::size_t i = 0; i < 32; ++i) {
            const auto& step = patch.trace[i];
            CHECK(step.k == static_cast<int>(i) + 1);
            CHECK(step.top_logit >= step.target_logit);
            CHECK(step.top_logit >= step.real_logit);
            if (!first && step.top_token == x.t_target) first = step.k;
        }
        CHECK(patch.minimal_k == first);

        // swapping every dimension is the same as exchanging the operator tokens
        auto tokens = tokenize(x.prompt.text);
        std::swap(tokens[static_cast<std::size_t>(x.pos1)], tokens[static_cast<std::size_t>(x.pos2)]);
        const auto logits = forward(m, tokens).logits;
        CHECK(patch.trace.back().top_token == argmax(logits.row(logits.rows() - 1)));

        const auto again = cumulative_patch(m, x, dim_contributions(m, x));
        CHECK(again.minimal_k == patch.minimal_k);
        CHECK(again.trace.back().target_logit == patch.trace.back().target_logit);
    }
}

TEST_CASE("an unanswered baseline is rejected") {
    const auto& m = memorized_model();
    for (const auto& e : no_paren_sample(32)) {
        if (predict_answer(m, e.text) == e.final_value) continue;
        SwapExperiment x;
        try {
            x = make_swap_experiment(e);
        } catch (const InterventionError&) {
            continue;
        }
        CHECK_THROWS_AS(dim_contributions(m, x), InterventionError);
        return;
    }
    auto x = make_swap_experiment(expression_from_text("3 + 4 * 5 = "));
    x.t_real = (predict_answer(m, x.prompt.text) + 1) % 163;
    CHECK_THROWS_AS(dim_contributions(m, x), InterventionError);
}

TEST_CASE("ablation sweep") {
    const auto& m = memorized_model();
    const auto prompts = correct_subset(m, no_paren_sample(32));
    REQUIRE_FALSE(prompts.empty());
    const auto r = ablate_attention_sweep(m, prompts, 10);
    CHECK(r.prompts == prompts.size());
    CHECK(r.baseline_accuracy == 1.0);
    CHECK(r.accuracy.size() == 2);
    CHECK(r.detections.size() == 2);

    // a layer whose attention writes nothing is unaffected by ablation
    auto silent = m;
    auto wo = silent.tensor("layers.1.wo");
    std::fill(wo.data, wo.data + wo.rows * wo.cols, 0.0);
    const auto s = ablate_attention_sweep(silent, prompts, 10);
    CHECK(s.accuracy[1] == s.baseline_accuracy);
    CHECK(s.detections[1] == s.baseline_detections);

    std::ostringstream out;
    write_ablation_csv(out, r);
    std::istringstream in(out.str());
    std::string line;
    std::size_t lines = 0;
    while (std::getline(in, line)) ++lines;
    CHECK(lines == 4);
}

TEST_CASE("csv writers") {
    ContributionRanking ranking{{{3, 0.5}, {1, -0.25}}, 2.0};
    std::ostringstream c;
    write_contributions_csv(c, ranking);
    CHECK(c.str().rfind("rank,dim,delta_logit\n", 0) == 0);
    PatchResult patch{2, {{1, 0.1, 0.2, 0.3, 4}, {2, 0.5, 0.2, 0.5, 35}}};
    std::ostringstream p;
    write_patch_csv(p, patch);
    CHECK(p.str().rfind("k,swapped_logit,real_logit,top_logit,top_token\n", 0) == 0);
}

}
