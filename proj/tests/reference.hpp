#pragma once

// Straight-line reimplementation of the transformer forward pass used as a
// test oracle. It shares no code with the engine: every step is an explicit
// loop over named weights.

#include <cmath>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include "arithlens/model.hpp"

namespace reference {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

inline ::arithlens::ModelConfig small_config(std::uint64_t seed = 11) {
    ::arithlens::ModelConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 32;
    c.seed = seed;
    return c;
}

inline Vec rmsnorm(const Vec& x, const ::arithlens::ConstMatRef& gain) {
    double ss = 0.0;
    for (double v : x) ss += v * v;
    const double r = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + 1e-5);
    Vec out(x.size());
    for (std::size_t j = 0; j < x.size(); ++j) out[j] = x[j] * r * gain(0, j);
    return out;
}

inline Vec times(const Vec& x, const ::arithlens::ConstMatRef& w) {
    Vec out(w.cols, 0.0);
    for (std::size_t i = 0; i < w.rows; ++i)
        for (std::size_t j = 0; j < w.cols; ++j) out[j] += x[i] * w(i, j);
    return out;
}

inline void rope(Vec& x, std::size_t offset, std::size_t head_dim, int pos, double base) {
    const std::size_t half = head_dim / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double theta = pos * std::pow(base, -static_cast<double>(i) / static_cast<double>(half));
        const double a = x[offset + i], b = x[offset + i + half];
        x[offset + i] = a * std::cos(theta) - b * std::sin(theta);
        x[offset + i + half] = a * std::sin(theta) + b * std::cos(theta);
    }
}

inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / std::numbers::pi) * (x + 0.044715 * x * x * x)));
}

/// Logits (seq x vocab). Layers in `ablate` contribute no attention output.
inline Mat logits(const ::arithlens::ModelBundle& m, const std::vector<int>& tokens, const std::set<int>& ablate = {}) {
    const auto& c = m.config();
    const std::size_t n = tokens.size(), d = static_cast<std::size_t>(c.d_model);
    const std::size_t hd = static_cast<std::size_t>(c.head_dim());
    const auto emb = m.tensor("tok_embedding");
    Mat x(n, Vec(d));
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t j = 0; j < d; ++j) x[t][j] = emb(static_cast<std::size_t>(tokens[t]), j);

    for (int l = 0; l < c.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        if (!ablate.count(l)) {
            Mat q(n), k(n), v(n);
            for (std::size_t t = 0; t < n; ++t) {
                const Vec h = rmsnorm(x[t], m.tensor(p + "attn_norm"));
                q[t] = times(h, m.tensor(p + "wq"));
                k[t] = times(h, m.tensor(p + "wk"));
                v[t] = times(h, m.tensor(p + "wv"));
                for (int head = 0; head < c.n_heads; ++head) {
                    rope(q[t], static_cast<std::size_t>(head) * hd, hd, static_cast<int>(t), c.rope_base);
                    rope(k[t], static_cast<std::size_t>(head) * hd, hd, static_cast<int>(t), c.rope_base);
                }
            }
            Mat ctx(n, Vec(d, 0.0));
            for (int head = 0; head < c.n_heads; ++head) {
                const std::size_t o = static_cast<std::size_t>(head) * hd;
                for (std::size_t i = 0; i < n; ++i) {
                    Vec score(i + 1);
                    double mx = -1e300;
                    for (std::size_t j = 0; j <= i; ++j) {
                        double s = 0.0;
                        for (std::size_t e = 0; e < hd; ++e) s += q[i][o + e] * k[j][o + e];
                        score[j] = s / std::sqrt(static_cast<double>(hd));
                        mx = std::max(mx, score[j]);
                    }
                    double z = 0.0;
                    for (auto& s : score) z += (s = std::exp(s - mx));
                    for (std::size_t j = 0; j <= i; ++j)
                        for (std::size_t e = 0; e < hd; ++e) ctx[i][o + e] += score[j] / z * v[j][o + e];
                }
            }
            for (std::size_t t = 0; t < n; ++t) {
                const Vec out = times(ctx[t], m.tensor(p + "wo"));
                for (std::size_t j = 0; j < d; ++j) x[t][j] += out[j];
            }
        }
        for (std::size_t t = 0; t < n; ++t) {
            Vec h = times(rmsnorm(x[t], m.tensor(p + "mlp_norm")), m.tensor(p + "w1"));
            for (auto& e : h) e = gelu(e);
            const Vec out = times(h, m.tensor(p + "w2"));
            for (std::size_t j = 0; j < d; ++j) x[t][j] += out[j];
        }
    }
    Mat result(n);
    for (std::size_t t = 0; t < n; ++t) result[t] = times(rmsnorm(x[t], m.tensor("final_norm")), m.tensor("unembedding"));
    return result;
}

}  // namespace reference
