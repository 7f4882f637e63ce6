#include <doctest.h>

#include <cmath>

#include "arithlens/engine.hpp"
#include "arithlens/exprgen.hpp"
#include "arithlens/model.hpp"
#include "reference.hpp"

using namespace arithlens;

namespace {

double max_rel_error(const Matrix& got, const reference::Mat& want) {
    double worst = 0.0;
    for (std::size_t i = 0; i < want.size(); ++i)
        for (std::size_t j = 0; j < want[i].size(); ++j)
            worst = std::max(worst, std::abs(got(i, j) - want[i][j]) / std::max(1.0, std::abs(want[i][j])));
    return worst;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("config validation") {
    ModelConfig c;
    CHECK_NOTHROW(c.validate());
    CHECK(c.head_dim() == 32);
    c.n_heads = 5;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = ModelConfig{};
    c.n_layers = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = ModelConfig{};
    c.d_model = 12;
    c.n_heads = 4;  // odd head dimension cannot be split into rotary pairs
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("parameter layout matches the configuration") {
    const ModelConfig c;
    const auto layout = ParameterLayout::for_config(c);
    const std::size_t d = 128, ff = 512, v = 172;
    CHECK(layout.total() == v * d + 6 * (2 * d + 4 * d * d + 2 * d * ff) + d + d * v);
    CHECK(layout.find("unembedding").shape == std::vector<std::size_t>{d, v});
    CHECK(layout.find("layers.5.w2").shape == std::vector<std::size_t>{ff, d});
    CHECK_THROWS(layout.find("layers.6.wq"));
}

TEST_CASE("initialization") {
    const auto m = ModelBundle::initialized(ModelConfig{});
    const auto gain = m.tensor("layers.3.mlp_norm");
    for (std::size_t j = 0; j < gain.cols; ++j) CHECK(gain(0, j) == 1.0);
    const auto wq = m.tensor("layers.0.wq");
    const double bound = 1.0 / std::sqrt(128.0);
    for (std::size_t i = 0; i < wq.rows * wq.cols; ++i) CHECK(std::abs(wq.data[i]) <= bound);
    const auto emb = m.tensor("tok_embedding");
    double sum = 0.0, sq = 0.0;
    const std::size_t n = emb.rows * emb.cols;
    for (std::size_t i = 0; i < n; ++i) {
        sum += emb.data[i];
        sq += emb.data[i] * emb.data[i];
    }
    CHECK(std::abs(sum / n) < 0.02);
    CHECK(std::abs(std::sqrt(sq / n) - 1.0) < 0.02);

    CHECK(ModelBundle::initialized(ModelConfig{}) == m);
    ModelConfig other;
    other.seed = 99;
    CHECK_FALSE(ModelBundle::initialized(other) == m);
}

TEST_CASE("forward matches the straight-line reference") {
    for (const auto& cfg : {reference::small_config(), ModelConfig{}}) {
        const auto m = ModelBundle::initialized(cfg);
        const auto tokens = tokenize("( 7 - 2 ) * 9 = 45");
        const auto got = forward(m, tokens);
        REQUIRE(got.logits.rows() == tokens.size());
        REQUIRE(got.logits.cols() == 172);
        CHECK(max_rel_error(got.logits, reference::logits(m, tokens)) < 1e-10);
    }
}

TEST_CASE("ablating every attention output matches a reference without attention") {
    const auto m = ModelBundle::initialized(ModelConfig{});
    const auto tokens = tokenize("4 + 8 / 4 = ");
    std::vector<HookSpec> hooks;
    std::set<int> all;
    for (int l = 0; l < 6; ++l) {
        hooks.emplace_back(AblateAttention{l});
        all.insert(l);
    }
    CHECK(max_rel_error(forward(m, tokens, hooks).logits, reference::logits(m, tokens, all)) < 1e-10);
    const std::vector<HookSpec> some{AblateAttention{1}, AblateAttention{4}};
    CHECK(max_rel_error(forward(m, tokens, some).logits, reference::logits(m, tokens, {1, 4})) < 1e-10);
}

TEST_CASE("empty hooks and capture leave logits bit-exact") {
    const auto m = ModelBundle::initialized(ModelConfig{});
    const auto tokens = tokenize("2 + 3 * 3 = ");
    const auto plain = forward(m, tokens);
    const auto hooked = forward(m, tokens, std::vector<HookSpec>{});
    const auto captured = forward(m, tokens, {}, true);
    CHECK(plain.logits == hooked.logits);
    CHECK(plain.logits == captured.logits);
    CHECK_FALSE(plain.cache.has_value());
    REQUIRE(captured.cache.has_value());
    CHECK(captured.cache->n_layers() == 6);
    CHECK(captured.cache->seq_len() == 7);
    CHECK(captured.cache->d_model() == 128);
}

TEST_CASE("forward errors") {
    const auto m = ModelBundle::initialized(reference::small_config());
    std::vector<int> too_long(17, 1);
    CHECK_THROWS_AS(forward(m, too_long), std::invalid_argument);
    CHECK_THROWS_AS(forward(m, std::vector<int>{}), std::invalid_argument);
    const auto tokens = tokenize("1 + 2 * 3 = ");
    CHECK_THROWS_AS(forward(m, tokens, std::vector<HookSpec>{AblateAttention{2}}), HookError);
    CHECK_THROWS_AS(forward(m, tokens, std::vector<HookSpec>{SwapDims{1, 1, {0}}}), HookError);
    CHECK_THROWS_AS(forward(m, tokens, std::vector<HookSpec>{SwapDims{1, 7, {0}}}), HookError);
    CHECK_THROWS_AS(forward(m, tokens, std::vector<HookSpec>{SwapDims{1, 3, {16}}}), HookError);
}

TEST_CASE("causal mask: earlier positions ignore later tokens") {
    const auto m = ModelBundle::initialized(ModelConfig{});
    const auto a = forward(m, tokenize("5 * 3 - 9 = ")).logits;
    const auto b = forward(m, tokenize("5 * 3 + 1 = ")).logits;
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 172; ++j) REQUIRE(a(i, j) == b(i, j));
    bool differs = false;
    for (std::size_t j = 0; j < 172; ++j) differs |= a(5, j) != b(5, j);
    CHECK(differs);
}

TEST_CASE("attention rows are probability distributions") {
    const auto m = ModelBundle::initialized(ModelConfig{});
    engine::Batch batch;
    batch.add(tokenize("9 - 8 / 2 = "));
    batch.add(tokenize("( 1 + 1 ) * 1 = "));
    engine::Tape tape;
    engine::forward_batch(m, batch, {}, tape);
    for (const auto& lt : tape.layers) {
        std::size_t at = 0;
        for (std::size_t s = 0; s < batch.sequences(); ++s) {
            const std::size_t len = batch.length(s);
            for (int h = 0; h < 4; ++h) {
                for (std::size_t i = 0; i < len; ++i) {
                    double row = 0.0;
                    for (std::size_t j = 0; j < len; ++j) {
                        const double p = lt.probs[at + i * len + j];
                        CHECK(p >= 0.0);
                        if (j > i) CHECK(p == 0.0);
                        row += p;
                    }
                    CHECK(std::abs(row - 1.0) < 1e-6);
                }
                at += len * len;
            }
        }
    }
}

TEST_CASE("packed batches reproduce single-sequence forwards bit-exactly") {
    const auto m = ModelBundle::initialized(ModelConfig{});
    const std::vector<std::string> prompts{"1 + 2 * 3 = ", "( 9 + 9 ) * 9 = ", "7 / 7 - 1 = "};
    engine::Batch batch;
    for (const auto& p : prompts) batch.add(tokenize(p));
    engine::Tape tape;
    engine::forward_batch(m, batch, {}, tape);
    for (std::size_t s = 0; s < prompts.size(); ++s) {
        const auto single = forward(m, tokenize(prompts[s])).logits;
        for (std::size_t i = 0; i < single.rows(); ++i)
            for (std::size_t j = 0; j < 172; ++j) REQUIRE(single(i, j) == tape.logits(batch.offsets[s] + i, j));
    }
}

TEST_CASE("unembed reproduces the output logits bit-exactly") {
    const auto m = ModelBundle::initialized(ModelConfig{});
    const auto tokens = tokenize("3 + 4 * 5 = ");
    const auto r = forward(m, tokens, {}, true);
    for (int pos = 0; pos < 7; ++pos) {
        const auto logits = unembed(m, r.cache->at(5, CapturePoint::PostMlp, pos));
        for (std::size_t j = 0; j < 172; ++j) REQUIRE(logits[j] == r.logits(static_cast<std::size_t>(pos), j));
    }
    CHECK_THROWS_AS(unembed(m, std::vector<double>(5)), std::invalid_argument);
}

TEST_CASE("prediction tie-break") {
    auto m = ModelBundle::initialized(reference::small_config());
    auto u = m.tensor("unembedding");
    std::fill(u.data, u.data + u.rows * u.cols, 0.0);
    CHECK(predict_answer(m, "2 + 3 * 3 = ") == 0);
    CHECK(argmax(std::vector<double>{1.0, 3.0, 3.0, 2.0}) == 1);
}

}
