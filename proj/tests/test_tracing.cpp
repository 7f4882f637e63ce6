#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "arithlens/exprgen.hpp"
#include "arithlens/model.hpp"
#include "arithlens/tracing.hpp"
#include "reference.hpp"

using namespace arithlens;

namespace {

std::vector<int> all_dims(int d) {
    std::vector<int> dims(static_cast<std::size_t>(d));
    std::iota(dims.begin(), dims.end(), 0);
    return dims;
}

bool same(std::span<const double> a, std::span<const double> b) {
    return std::equal(a.begin(), a.end(), b.begin(), b.end());
}

}  // namespace

TEST_SUITE("tracing") {

TEST_CASE("cache layout for a seven-token prompt") {
    const auto m = ModelBundle::initialized(ModelConfig{});
    const auto cache = capture(m, "2 + 3 * 3 = ");
    CHECK(cache.n_layers() * kCapturePoints * cache.seq_len() * cache.d_model() == 6 * 3 * 7 * 128);
    CHECK(cache.all_finite());
    CHECK_THROWS_AS(cache.at(6, CapturePoint::BlockInput, 0), std::out_of_range);
    CHECK_THROWS_AS(cache.at(0, CapturePoint::BlockInput, 7), std::out_of_range);
}

TEST_CASE("block input of layer 0 is the token embedding") {
    const auto m = ModelBundle::initialized(ModelConfig{});
    const auto tokens = tokenize("2 + 3 * 3 = ");
    const auto cache = capture(m, "2 + 3 * 3 = ");
    const auto emb = m.tensor("tok_embedding");
    for (int p = 0; p < 7; ++p) {
        const auto row = cache.at(0, CapturePoint::BlockInput, p);
        for (int j = 0; j < 128; ++j) REQUIRE(row[static_cast<std::size_t>(j)] == emb(static_cast<std::size_t>(tokens[static_cast<std::size_t>(p)]), static_cast<std::size_t>(j)));
    }
}

TEST_CASE("residual identities") {
    const auto m = ModelBundle::initialized(ModelConfig{});
    const auto cache = capture(m, "( 4 + 5 ) / 3 = ");
    for (int l = 0; l < 6; ++l) {
        for (int p = 0; p < cache.seq_len(); ++p) {
            const auto in = cache.at(l, CapturePoint::BlockInput, p);
            const auto mid = cache.at(l, CapturePoint::PostAttention, p);
            const auto out = cache.at(l, CapturePoint::PostMlp, p);
            const auto attn = cache.attention_output(l, p);
            const auto mlp = cache.mlp_output(l, p);
            for (std::size_t j = 0; j < 128; ++j) {
                CHECK(std::abs(mid[j] - in[j] - attn[j]) < 1e-6);
                CHECK(std::abs(out[j] - mid[j] - mlp[j]) < 1e-6);
            }
            if (l + 1 < 6) CHECK(same(out, cache.at(l + 1, CapturePoint::BlockInput, p)));
        }
    }
}

TEST_CASE("resuming from a cached block input reproduces the downstream cache") {
    const auto m = ModelBundle::initialized(ModelConfig{});
    const auto tokens = tokenize("8 - 6 / 2 = ");
    const auto full = forward(m, tokens, {}, true);
    for (int layer : {0, 2, 5}) {
        const Matrix start = full.cache->site(layer, CapturePoint::BlockInput);
        const auto resumed = forward_from_layer(m, layer, start.cref(), {}, true);
        CHECK(resumed.logits == full.logits);
        for (int l = layer; l < 6; ++l) {
            for (auto point : kAllCapturePoints) {
                for (int p = 0; p < 6; ++p) REQUIRE(same(resumed.cache->at(l, point, p), full.cache->at(l, point, p)));
            }
        }
    }
    CHECK_THROWS_AS(forward_from_layer(m, 6, full.cache->site(0, CapturePoint::BlockInput).cref()), std::invalid_argument);
}

TEST_CASE("trivial swaps are bit-exact no-ops") {
    const auto m = ModelBundle::initialized(ModelConfig{});
    const auto tokens = tokenize("3 + 3 * 3 = ");
    const auto base = forward(m, tokens).logits;
    CHECK(forward(m, tokens, std::vector<HookSpec>{SwapDims{2, 4, {}}}).logits == base);
    CHECK(forward(m, tokens, std::vector<HookSpec>{SwapDims{1, 3, all_dims(128)}}).logits == base);
    CHECK(forward(m, tokens, std::vector<HookSpec>{SwapDims{1, 5, all_dims(128), SwapSite::BlockInput}}).logits == base);
}

TEST_CASE("full swap of operator embeddings equals the operator-exchanged prompt") {
    const auto m = ModelBundle::initialized(ModelConfig{});
    for (const char* text : {"3 + 4 * 5 = ", "8 - 4 / 2 = ", "9 - 2 * 3 = "}) {
        const auto e = expression_from_text(text);
        const auto pos = e.operator_positions();
        const auto swapped = forward(m, tokenize(e.text), std::vector<HookSpec>{SwapDims{pos[0], pos[1], all_dims(128)}});
        const auto other = exchanged_prompt(e);
        REQUIRE(other.has_value());
        CHECK(swapped.logits == forward(m, tokenize(other->text)).logits);
    }
}

TEST_CASE("post-attention swap site exchanges the layer-0 residual after attention") {
    const auto m = ModelBundle::initialized(ModelConfig{});
    const auto tokens = tokenize("3 + 4 * 5 = ");
    const auto base = forward(m, tokens, {}, true);
    const std::vector<int> dims{0, 5, 77};
    const auto hooked = forward(m, tokens, std::vector<HookSpec>{SwapDims{2, 4, dims, SwapSite::PostAttention}}, true);
    for (int p = 0; p < 7; ++p) CHECK(same(hooked.cache->at(0, CapturePoint::BlockInput, p), base.cache->at(0, CapturePoint::BlockInput, p)));
    const auto b2 = base.cache->at(0, CapturePoint::PostAttention, 2);
    const auto b4 = base.cache->at(0, CapturePoint::PostAttention, 4);
    const auto h2 = hooked.cache->at(0, CapturePoint::PostAttention, 2);
    const auto h4 = hooked.cache->at(0, CapturePoint::PostAttention, 4);
    for (int j = 0; j < 128; ++j) {
        const auto u = static_cast<std::size_t>(j);
        const bool swapped = std::ranges::find(dims, j) != dims.end();
        CHECK(h2[u] == (swapped ? b4[u] : b2[u]));
        CHECK(h4[u] == (swapped ? b2[u] : b4[u]));
    }
}

TEST_CASE("ablation hooks compose independently of order") {
    const auto m = ModelBundle::initialized(ModelConfig{});
    const auto tokens = tokenize("6 / 3 + 2 = ");
    const auto ij = forward(m, tokens, std::vector<HookSpec>{AblateAttention{1}, AblateAttention{3}}).logits;
    const auto ji = forward(m, tokens, std::vector<HookSpec>{AblateAttention{3}, AblateAttention{1}}).logits;
    CHECK(ij == ji);
    const auto want = reference::logits(m, tokens, {1, 3});
    for (std::size_t i = 0; i < want.size(); ++i)
        for (std::size_t j = 0; j < want[i].size(); ++j) CHECK(std::abs(ij(i, j) - want[i][j]) < 1e-9);
}

TEST_CASE("apply_swaps exchanges only the listed dimensions at the requested site") {
    Matrix s(3, 4);
    for (std::size_t i = 0; i < 12; ++i) s.values()[i] = static_cast<double>(i);
    const std::vector<HookSpec> hooks{SwapDims{0, 2, {1, 3}, SwapSite::BlockInput}, AblateAttention{0},
                                      SwapDims{0, 1, {0}, SwapSite::PostAttention}};
    apply_swaps(hooks, SwapSite::BlockInput, s.ref());
    CHECK(s.values() == std::vector<double>{0, 9, 2, 11, 4, 5, 6, 7, 8, 1, 10, 3});
    CHECK(attention_ablated(hooks, 0));
    CHECK_FALSE(attention_ablated(hooks, 1));
}

TEST_CASE("hook validation") {
    const ModelConfig c;
    CHECK_NOTHROW(validate_hooks(std::vector<HookSpec>{AblateAttention{5}, SwapDims{0, 6, {127}}}, c, 7));
    CHECK_THROWS_AS(validate_hooks(std::vector<HookSpec>{AblateAttention{-1}}, c, 7), HookError);
    CHECK_THROWS_AS(validate_hooks(std::vector<HookSpec>{SwapDims{0, 0, {1}}}, c, 7), HookError);
    CHECK_THROWS_AS(validate_hooks(std::vector<HookSpec>{SwapDims{-1, 2, {1}}}, c, 7), HookError);
    CHECK_THROWS_AS(validate_hooks(std::vector<HookSpec>{SwapDims{0, 2, {-1}}}, c, 7), HookError);
}

TEST_CASE("cache dump") {
    const auto m = ModelBundle::initialized(reference::small_config());
    const auto cache = capture(m, "1 + 2 * 3 = ");
    std::ostringstream out;
    cache.write_csv(out);
    std::istringstream in(out.str());
    std::string header, line;
    std::getline(in, header);
    CHECK(header.rfind("layer,point,position,v0,", 0) == 0);
    std::size_t rows = 0;
    while (std::getline(in, line)) ++rows;
    CHECK(rows == 2 * 3 * 7);
}

}
