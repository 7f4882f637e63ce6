#include <doctest.h>

#include <cmath>
#include <set>

#include "arithlens/engine.hpp"
#include "arithlens/exprgen.hpp"
#include "arithlens/train.hpp"
#include "reference.hpp"

using namespace arithlens;

namespace {

std::vector<Expression> first_n(std::size_t n, std::size_t stride = 97) {
    const auto all = enumerate_default_dataset();
    std::vector<Expression> out;
    for (std::size_t i = 0; out.size() < n; i += stride) out.push_back(all[i % all.size()]);
    return out;
}

double answer_cross_entropy(const ModelBundle& m, const Expression& e) {
    const auto logits = forward(m, tokenize(e.text)).logits;
    const auto row = logits.row(logits.rows() - 1);
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    return std::log(z) + mx - row[static_cast<std::size_t>(*vocab::integer_token(e.final_value))];
}

}  // namespace

TEST_SUITE("train") {

TEST_CASE("train config parsing") {
    const auto c = TrainConfig::from_json_text(R"({"lr": 0.01, "steps": 12, "batch_size": 4})");
    CHECK(c.lr == 0.01);
    CHECK(c.steps == 12);
    CHECK(c.batch_size == 4);
    CHECK(c.seed == TrainConfig{}.seed);
    const auto again = TrainConfig::from_json_text(c.to_json());
    CHECK(again.to_json() == c.to_json());
    CHECK_THROWS_AS(TrainConfig::from_json_text(R"({"learning_rate": 0.01})"), std::invalid_argument);
    CHECK_THROWS_AS(TrainConfig::from_json_text(R"({"lr": -1})"), std::invalid_argument);
    CHECK_THROWS_AS(TrainConfig::from_json_text(R"({"split_fraction": 1.0})"), std::invalid_argument);
    CHECK_THROWS_AS(TrainConfig::from_json_text("{"), std::invalid_argument);
    CHECK_THROWS_AS(TrainConfig::from_file("/nonexistent/train.json"), std::invalid_argument);
}

TEST_CASE("split is a seeded partition") {
    const auto s = split_dataset(8547, 0.9, 7);
    CHECK(s.train.size() == 7692);
    CHECK(s.heldout.size() == 855);
    std::set<std::size_t> seen(s.train.begin(), s.train.end());
    seen.insert(s.heldout.begin(), s.heldout.end());
    CHECK(seen.size() == 8547);
    CHECK(*seen.rbegin() == 8546);
    CHECK(split_dataset(8547, 0.9, 7).train == s.train);
    CHECK(split_dataset(8547, 0.9, 8).train != s.train);
}

TEST_CASE("training sequence appends the answer token") {
    const auto e = expression_from_text("2 + 3 * 3 = ");
    CHECK(training_sequence(e) == std::vector<int>{vocab::kBos, 2, vocab::kPlus, 3, vocab::kTimes, 3, vocab::kEquals, 11});
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
    const auto m = ModelBundle::initialized(reference::small_config());
    TrainConfig c;
    c.lr = 0.0;
    c.steps = 5;
    c.batch_size = 8;
    const auto r = train(m, first_n(64), c);
    CHECK(r.model == m);
    REQUIRE(r.trace.size() == 1);
    CHECK(r.trace.back().train_loss > 0.0);
}

TEST_CASE("training is deterministic for a fixed seed") {
    const auto m = ModelBundle::initialized(reference::small_config());
    const auto data = first_n(64);
    TrainConfig c;
    c.steps = 20;
    c.batch_size = 8;
    c.warmup_steps = 5;
    c.eval_every = 10;
    const auto a = train(m, data, c);
    const auto b = train(m, data, c);
    CHECK(a.model == b.model);
    CHECK_FALSE(a.model == m);
    REQUIRE(a.trace.size() == 2);
    CHECK(a.trace[1].train_loss == b.trace[1].train_loss);
    CHECK(a.model.meta.steps == 20);
    CHECK(a.model.meta.dataset_hash == dataset_hash(data));
}

TEST_CASE("a small model memorizes the answers of 32 expressions") {
    auto cfg = reference::small_config(5);
    cfg.d_model = 32;
    cfg.d_ff = 64;
    const auto data = first_n(32, 263);
    TrainConfig c;
    c.lr = 1e-2;
    c.steps = 2000;
    c.batch_size = 32;
    c.split_fraction = 0.999;
    c.weight_decay = 0.0;
    c.warmup_steps = 50;
    const auto r = train(ModelBundle::initialized(cfg), data, c);
    double answer_loss = 0.0;
    for (const auto& e : data) answer_loss += answer_cross_entropy(r.model, e);
    answer_loss /= static_cast<double>(data.size());
    CHECK(answer_loss < 0.01);
    for (const auto& e : data) CHECK(predict_answer(r.model, e.text) == e.final_value);
}

TEST_CASE("non-finite loss aborts with a divergence error") {
    auto m = ModelBundle::initialized(reference::small_config());
    m.tensor("unembedding")(0, 0) = std::numeric_limits<double>::quiet_NaN();
    TrainConfig c;
    c.steps = 3;
    c.batch_size = 4;
    CHECK_THROWS_AS(train(m, first_n(16), c), DivergenceError);
    CHECK_THROWS_AS(train(ModelBundle::initialized(reference::small_config()), std::vector<Expression>{}, c),
                    std::invalid_argument);
}

TEST_CASE("analytic gradients agree with finite differences") {
    const auto m = ModelBundle::initialized(reference::small_config(3));
    const auto seq = training_sequence(expression_from_text("( 8 - 2 ) / 3 = "));
    GradCheckOptions o;
    o.samples = 300;
    const auto r = grad_check(m, seq, o);
    CHECK(r.checked == 300);
    CHECK(r.max_relative_error < 1e-3);

    o.samples = 10;
    o.inject_error_at = m.layout().find("layers.1.w1").offset + 3;
    const auto bad = grad_check(m, seq, o);
    CHECK(bad.max_relative_error > 0.5);
    CHECK(bad.worst_index == *o.inject_error_at);
}

TEST_CASE("batched loss equals the mean of per-sequence cross-entropies") {
    const auto m = ModelBundle::initialized(reference::small_config());
    const auto data = first_n(5);
    engine::Batch batch;
    std::vector<int> targets;
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& e : data) {
        const auto seq = training_sequence(e);
        batch.add(std::span<const int>(seq).first(seq.size() - 1));
        targets.insert(targets.end(), seq.begin() + 1, seq.end());
        const auto logits = reference::logits(m, std::vector<int>(seq.begin(), seq.end() - 1));
        for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
            double mx = logits[i][0];
            for (double v : logits[i]) mx = std::max(mx, v);
            double z = 0.0;
            for (double v : logits[i]) z += std::exp(v - mx);
            total += std::log(z) + mx - logits[i][static_cast<std::size_t>(seq[i + 1])];
            ++count;
        }
    }
    engine::Tape tape;
    engine::forward_batch(m, batch, {}, tape);
    CHECK(engine::cross_entropy(tape, targets) == doctest::Approx(total / static_cast<double>(count)).epsilon(1e-10));
}

}
