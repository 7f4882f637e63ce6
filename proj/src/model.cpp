#include "arithlens/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "arithlens/engine.hpp"

namespace arithlens {

void ModelConfig::validate() const {
    if (n_layers < 1 || d_model < 2 || n_heads < 1 || d_ff < 1 || max_seq < 1 || vocab_size < 1) {
        throw std::invalid_argument("model config: all sizes must be positive");
    }
    if (d_model % n_heads != 0) throw std::invalid_argument("model config: d_model must be divisible by n_heads");
    if (head_dim() % 2 != 0) throw std::invalid_argument("model config: rotary head dimension must be even");
    if (!(rope_base > 1.0)) throw std::invalid_argument("model config: rope_base must exceed 1");
}

void ParameterLayout::add(std::string name, std::vector<std::size_t> shape) {
    std::size_t size = 1;
    for (auto s : shape) size *= s;
    tensors_.push_back({std::move(name), std::move(shape), total_, size});
    total_ += size;
}

ParameterLayout ParameterLayout::for_config(const ModelConfig& c) {
    c.validate();
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto ff = static_cast<std::size_t>(c.d_ff);
    const auto v = static_cast<std::size_t>(c.vocab_size);
    ParameterLayout layout;
    layout.add("tok_embedding", {v, d});
    for (int l = 0; l < c.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        layout.add(p + "attn_norm", {d});
        layout.add(p + "wq", {d, d});
        layout.add(p + "wk", {d, d});
        layout.add(p + "wv", {d, d});
        layout.add(p + "wo", {d, d});
        layout.add(p + "mlp_norm", {d});
        layout.add(p + "w1", {d, ff});
        layout.add(p + "w2", {ff, d});
    }
    layout.add("final_norm", {d});
    layout.add("unembedding", {d, v});
    return layout;
}

const TensorInfo& ParameterLayout::find(std::string_view name) const {
    for (const auto& t : tensors_) {
        if (t.name == name) return t;
    }
    throw std::out_of_range("no tensor named " + std::string(name));
}

ModelBundle::ModelBundle(const ModelConfig& config)
    : config_(config), layout_(ParameterLayout::for_config(config)), params_(layout_.total(), 0.0) {
    embedding_ = layout_.find("tok_embedding").offset;
    final_norm_ = layout_.find("final_norm").offset;
    unembedding_ = layout_.find("unembedding").offset;
    for (int l = 0; l < config_.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        layer_offsets_.push_back({layout_.find(p + "attn_norm").offset, layout_.find(p + "wq").offset,
                                  layout_.find(p + "wk").offset, layout_.find(p + "wv").offset,
                                  layout_.find(p + "wo").offset, layout_.find(p + "mlp_norm").offset,
                                  layout_.find(p + "w1").offset, layout_.find(p + "w2").offset});
    }
}

ModelBundle ModelBundle::initialized(const ModelConfig& config) {
    ModelBundle m(config);
    std::mt19937_64 rng(config.seed);
    for (const auto& t : m.layout_.tensors()) {
        double* p = m.params_.data() + t.offset;
        if (t.shape.size() == 1) {
            std::fill(p, p + t.size, 1.0);  // norm gains
        } else if (t.name == "tok_embedding") {
            std::normal_distribution<double> dist(0.0, 1.0);
            for (std::size_t i = 0; i < t.size; ++i) p[i] = dist(rng);
        } else {
            const double bound = 1.0 / std::sqrt(static_cast<double>(t.shape[0]));
            std::uniform_real_distribution<double> dist(-bound, bound);
            for (std::size_t i = 0; i < t.size; ++i) p[i] = dist(rng);
        }
    }
    return m;
}

MatRef ModelBundle::tensor(std::string_view name) {
    const auto& t = layout_.find(name);
    const std::size_t rows = t.shape.size() == 1 ? 1 : t.shape[0];
    return {params_.data() + t.offset, rows, t.size / rows};
}

ConstMatRef ModelBundle::tensor(std::string_view name) const {
    const auto& t = layout_.find(name);
    const std::size_t rows = t.shape.size() == 1 ? 1 : t.shape[0];
    return {params_.data() + t.offset, rows, t.size / rows};
}

namespace engine {

namespace {

constexpr double kRmsEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

ConstMatRef weight(const ModelBundle& m, std::size_t offset, std::size_t rows, std::size_t cols) {
    return {m.parameters().data() + offset, rows, cols};
}

MatRef grad_ref(std::span<double> g, std::size_t offset, std::size_t rows, std::size_t cols) {
    return {g.data() + offset, rows, cols};
}

void rms_norm(const Matrix& x, const double* gain, Matrix& out, std::vector<double>& inv_rms) {
    const std::size_t n = x.rows(), d = x.cols();
    out.resize(n, d);
    inv_rms.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = x.row(i);
        double ss = 0.0;
        for (double v : row) ss += v * v;
        const double r = 1.0 / std::sqrt(ss / static_cast<double>(d) + kRmsEps);
        inv_rms[i] = r;
        auto o = out.row(i);
        for (std::size_t j = 0; j < d; ++j) o[j] = row[j] * r * gain[j];
    }
}

// Adds the input gradient to dx and the gain gradient to dgain.
void rms_norm_backward(const Matrix& x, const std::vector<double>& inv_rms, const double* gain, const Matrix& dy,
                       Matrix& dx, double* dgain) {
    const std::size_t n = x.rows(), d = x.cols();
    for (std::size_t i = 0; i < n; ++i) {
        const auto xi = x.row(i);
        const auto dyi = dy.row(i);
        auto dxi = dx.row(i);
        const double r = inv_rms[i];
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            dot += dyi[j] * gain[j] * xi[j];
            dgain[j] += dyi[j] * xi[j] * r;
        }
        const double coef = r * r * r * dot / static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) dxi[j] += r * gain[j] * dyi[j] - coef * xi[j];
    }
}

double rotary_frequency(std::size_t i, std::size_t half, double base) {
    return std::pow(base, -static_cast<double>(i) / static_cast<double>(half));
}

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); }

double gelu_grad(double x) {
    const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

MatRef block(Matrix& m, std::size_t row0, std::size_t rows) { return {m.row(row0).data(), rows, m.cols()}; }

std::size_t probs_size(const Batch& b, int heads) {
    std::size_t total = 0;
    for (std::size_t s = 0; s < b.sequences(); ++s) total += static_cast<std::size_t>(heads) * b.length(s) * b.length(s);
    return total;
}

void attention_forward(const ModelConfig& c, const Batch& batch, LayerTape& lt) {
    const auto hd = static_cast<std::size_t>(c.head_dim());
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    lt.ctx.resize(batch.rows(), static_cast<std::size_t>(c.d_model));
    lt.probs.assign(probs_size(batch, c.n_heads), 0.0);
    std::size_t poff = 0;
    std::vector<double> scores;
    for (std::size_t s = 0; s < batch.sequences(); ++s) {
        const std::size_t o = batch.offsets[s], len = batch.length(s);
        for (int h = 0; h < c.n_heads; ++h) {
            const std::size_t col = static_cast<std::size_t>(h) * hd;
            double* P = lt.probs.data() + poff;
            for (std::size_t i = 0; i < len; ++i) {
                const double* qi = lt.q.row(o + i).data() + col;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j <= i; ++j) {
                    const double* kj = lt.k.row(o + j).data() + col;
                    double dot = 0.0;
                    for (std::size_t p = 0; p < hd; ++p) dot += qi[p] * kj[p];
                    P[i * len + j] = dot * scale;
                    mx = std::max(mx, P[i * len + j]);
                }
                double sum = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    P[i * len + j] = std::exp(P[i * len + j] - mx);
                    sum += P[i * len + j];
                }
                double* ci = lt.ctx.row(o + i).data() + col;
                for (std::size_t p = 0; p < hd; ++p) ci[p] = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    P[i * len + j] /= sum;
                    const double w = P[i * len + j];
                    const double* vj = lt.v.row(o + j).data() + col;
                    for (std::size_t p = 0; p < hd; ++p) ci[p] += w * vj[p];
                }
            }
            poff += len * len;
        }
    }
}

void attention_backward(const ModelConfig& c, const Batch& batch, const LayerTape& lt, const Matrix& dctx,
                        Matrix& dq, Matrix& dk, Matrix& dv) {
    const auto hd = static_cast<std::size_t>(c.head_dim());
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const std::size_t n = batch.rows(), d = static_cast<std::size_t>(c.d_model);
    dq.resize(n, d);
    dk.resize(n, d);
    dv.resize(n, d);
    std::size_t poff = 0;
    std::vector<double> dP;
    for (std::size_t s = 0; s < batch.sequences(); ++s) {
        const std::size_t o = batch.offsets[s], len = batch.length(s);
        dP.assign(len, 0.0);
        for (int h = 0; h < c.n_heads; ++h) {
            const std::size_t col = static_cast<std::size_t>(h) * hd;
            const double* P = lt.probs.data() + poff;
            for (std::size_t i = 0; i < len; ++i) {
                const double* dci = dctx.row(o + i).data() + col;
                double rowdot = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    const double* vj = lt.v.row(o + j).data() + col;
                    double* dvj = dv.row(o + j).data() + col;
                    const double w = P[i * len + j];
                    double acc = 0.0;
                    for (std::size_t p = 0; p < hd; ++p) {
                        acc += dci[p] * vj[p];
                        dvj[p] += w * dci[p];
                    }
                    dP[j] = acc;
                    rowdot += w * acc;
                }
                const double* qi = lt.q.row(o + i).data() + col;
                double* dqi = dq.row(o + i).data() + col;
                for (std::size_t j = 0; j <= i; ++j) {
                    const double ds = P[i * len + j] * (dP[j] - rowdot) * scale;
                    if (ds == 0.0) continue;
                    const double* kj = lt.k.row(o + j).data() + col;
                    double* dkj = dk.row(o + j).data() + col;
                    for (std::size_t p = 0; p < hd; ++p) {
                        dqi[p] += ds * kj[p];
                        dkj[p] += ds * qi[p];
                    }
                }
            }
            poff += len * len;
        }
    }
}

// cos/sin per (position, frequency index); same formula as rotate().
struct RotaryTable {
    std::size_t half = 0;
    std::vector<double> cos, sin;

    RotaryTable(std::size_t max_len, std::size_t head_dim, double base) : half(head_dim / 2) {
        cos.resize(max_len * half);
        sin.resize(max_len * half);
        for (std::size_t pos = 0; pos < max_len; ++pos) {
            for (std::size_t i = 0; i < half; ++i) {
                const double angle = static_cast<double>(pos) * rotary_frequency(i, half, base);
                cos[pos * half + i] = std::cos(angle);
                sin[pos * half + i] = std::sin(angle);
            }
        }
    }
};

void rotate_rows(const ModelConfig& c, const Batch& batch, Matrix& m, bool inverse) {
    const auto hd = static_cast<std::size_t>(c.head_dim());
    std::size_t max_len = 0;
    for (std::size_t s = 0; s < batch.sequences(); ++s) max_len = std::max(max_len, batch.length(s));
    const RotaryTable table(max_len, hd, c.rope_base);
    const std::size_t half = table.half;
    for (std::size_t s = 0; s < batch.sequences(); ++s) {
        for (std::size_t pos = 0; pos < batch.length(s); ++pos) {
            auto row = m.row(batch.offsets[s] + pos);
            const double* cs = table.cos.data() + pos * half;
            const double* sn = table.sin.data() + pos * half;
            for (int h = 0; h < c.n_heads; ++h) {
                double* x = row.data() + static_cast<std::size_t>(h) * hd;
                for (std::size_t i = 0; i < half; ++i) {
                    const double si = inverse ? -sn[i] : sn[i];
                    const double a = x[i], b = x[i + half];
                    x[i] = a * cs[i] - b * si;
                    x[i + half] = a * si + b * cs[i];
                }
            }
        }
    }
}

void add_into(Matrix& out, const Matrix& a, const Matrix& b) {
    out.resize(a.rows(), a.cols());
    auto& o = out.values();
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
}

void apply_swaps_batch(std::span<const HookSpec> hooks, SwapSite site, const Batch& batch, Matrix& state) {
    for (std::size_t s = 0; s < batch.sequences(); ++s) {
        apply_swaps(hooks, site, block(state, batch.offsets[s], batch.length(s)));
    }
}

}  // namespace

void Batch::add(std::span<const int> seq) {
    tokens.insert(tokens.end(), seq.begin(), seq.end());
    offsets.push_back(tokens.size());
}

void rotate(std::span<double> x, int pos, double base, bool inverse) {
    const std::size_t half = x.size() / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double angle = static_cast<double>(pos) * rotary_frequency(i, half, base);
        const double cs = std::cos(angle);
        const double sn = inverse ? -std::sin(angle) : std::sin(angle);
        const double a = x[i], b = x[i + half];
        x[i] = a * cs - b * sn;
        x[i + half] = a * sn + b * cs;
    }
}

void forward_batch(const ModelBundle& model, const Batch& batch, std::span<const HookSpec> hooks, Tape& tape,
                   int start_layer, const Matrix* start_input) {
    const ModelConfig& c = model.config();
    const std::size_t n = batch.rows(), d = static_cast<std::size_t>(c.d_model);
    const auto ff = static_cast<std::size_t>(c.d_ff), vs = static_cast<std::size_t>(c.vocab_size);
    for (std::size_t s = 0; s < batch.sequences(); ++s) {
        if (batch.length(s) > static_cast<std::size_t>(c.max_seq)) {
            throw std::invalid_argument("sequence length " + std::to_string(batch.length(s)) + " exceeds max_seq " +
                                        std::to_string(c.max_seq));
        }
        validate_hooks(hooks, c, batch.length(s));
    }
    const double* params = model.parameters().data();
    tape.layers.resize(static_cast<std::size_t>(c.n_layers));
    tape.start_layer = start_layer;

    Matrix x;
    if (start_input != nullptr) {
        x = *start_input;
    } else {
        x.resize(n, d);
        const ConstMatRef emb = weight(model, model.embedding_offset(), vs, d);
        for (std::size_t i = 0; i < n; ++i) {
            const int t = batch.tokens[i];
            if (t < 0 || t >= c.vocab_size) throw std::invalid_argument("token id out of range");
            std::copy_n(emb.row(static_cast<std::size_t>(t)), d, x.row(i).data());
        }
    }

    for (int l = start_layer; l < c.n_layers; ++l) {
        LayerTape& lt = tape.layers[static_cast<std::size_t>(l)];
        const auto& w = model.layer_offsets(l);
        lt.x_in = std::move(x);
        if (l == 0) apply_swaps_batch(hooks, SwapSite::BlockInput, batch, lt.x_in);

        lt.ablated = attention_ablated(hooks, l);
        lt.attn_out.resize(n, d);
        if (!lt.ablated) {
            rms_norm(lt.x_in, params + w.attn_norm, lt.n1, lt.inv_rms1);
            lt.q.resize(n, d);
            lt.k.resize(n, d);
            lt.v.resize(n, d);
            kernels::matmul(lt.n1.ref(), weight(model, w.wq, d, d), lt.q.ref());
            kernels::matmul(lt.n1.ref(), weight(model, w.wk, d, d), lt.k.ref());
            kernels::matmul(lt.n1.ref(), weight(model, w.wv, d, d), lt.v.ref());
            rotate_rows(c, batch, lt.q, false);
            rotate_rows(c, batch, lt.k, false);
            attention_forward(c, batch, lt);
            kernels::matmul(lt.ctx.ref(), weight(model, w.wo, d, d), lt.attn_out.ref());
        }
        add_into(lt.x_mid, lt.x_in, lt.attn_out);
        if (l == 0) apply_swaps_batch(hooks, SwapSite::PostAttention, batch, lt.x_mid);

        rms_norm(lt.x_mid, params + w.mlp_norm, lt.n2, lt.inv_rms2);
        lt.h_pre.resize(n, ff);
        kernels::matmul(lt.n2.ref(), weight(model, w.w1, d, ff), lt.h_pre.ref());
        lt.h_act.resize(n, ff);
        for (std::size_t i = 0; i < lt.h_pre.values().size(); ++i) lt.h_act.values()[i] = gelu(lt.h_pre.values()[i]);
        lt.mlp_out.resize(n, d);
        kernels::matmul(lt.h_act.ref(), weight(model, w.w2, ff, d), lt.mlp_out.ref());
        add_into(x, lt.x_mid, lt.mlp_out);
    }

    tape.x_final = std::move(x);
    rms_norm(tape.x_final, params + model.final_norm_offset(), tape.nf, tape.inv_rms_f);
    tape.logits.resize(n, vs);
    kernels::matmul(tape.nf.ref(), weight(model, model.unembedding_offset(), d, vs), tape.logits.ref());
}

double cross_entropy(const Tape& tape, std::span<const int> targets) {
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < tape.logits.rows(); ++i) {
        if (targets[i] < 0) continue;
        const auto row = tape.logits.row(i);
        const double mx = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (double v : row) sum += std::exp(v - mx);
        total += std::log(sum) + mx - row[static_cast<std::size_t>(targets[i])];
        ++count;
    }
    return count == 0 ? 0.0 : total / static_cast<double>(count);
}

double loss_and_grad(const ModelBundle& model, const Batch& batch, std::span<const int> targets, Tape& tape,
                     std::span<double> grad) {
    const ModelConfig& c = model.config();
    forward_batch(model, batch, {}, tape);
    const std::size_t n = batch.rows(), d = static_cast<std::size_t>(c.d_model);
    const auto ff = static_cast<std::size_t>(c.d_ff), vs = static_cast<std::size_t>(c.vocab_size);
    const double* params = model.parameters().data();

    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) count += targets[i] >= 0 ? 1 : 0;
    const double inv_count = count == 0 ? 0.0 : 1.0 / static_cast<double>(count);

    double loss = 0.0;
    Matrix dlogits(n, vs);
    for (std::size_t i = 0; i < n; ++i) {
        if (targets[i] < 0) continue;
        const auto row = tape.logits.row(i);
        auto drow = dlogits.row(i);
        const double mx = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (std::size_t j = 0; j < vs; ++j) {
            drow[j] = std::exp(row[j] - mx);
            sum += drow[j];
        }
        const auto t = static_cast<std::size_t>(targets[i]);
        loss += std::log(sum) + mx - row[t];
        for (std::size_t j = 0; j < vs; ++j) drow[j] = drow[j] / sum * inv_count;
        drow[t] -= inv_count;
    }
    loss *= inv_count;

    kernels::matmul_at_acc(tape.nf.ref(), dlogits.ref(), grad_ref(grad, model.unembedding_offset(), d, vs));
    Matrix dnf(n, d);
    kernels::matmul_bt(dlogits.ref(), weight(model, model.unembedding_offset(), d, vs), dnf.ref());
    Matrix dx(n, d);
    rms_norm_backward(tape.x_final, tape.inv_rms_f, params + model.final_norm_offset(), dnf, dx,
                      grad.data() + model.final_norm_offset());

    Matrix dh(n, ff), dn(n, d), dx_mid, dctx(n, d), dq, dk, dv;
    for (int l = c.n_layers - 1; l >= 0; --l) {
        const LayerTape& lt = tape.layers[static_cast<std::size_t>(l)];
        const auto& w = model.layer_offsets(l);

        kernels::matmul_at_acc(lt.h_act.ref(), dx.ref(), grad_ref(grad, w.w2, ff, d));
        kernels::matmul_bt(dx.ref(), weight(model, w.w2, ff, d), dh.ref());
        for (std::size_t i = 0; i < dh.values().size(); ++i) dh.values()[i] *= gelu_grad(lt.h_pre.values()[i]);
        kernels::matmul_at_acc(lt.n2.ref(), dh.ref(), grad_ref(grad, w.w1, d, ff));
        kernels::matmul_bt(dh.ref(), weight(model, w.w1, d, ff), dn.ref());
        dx_mid = dx;
        rms_norm_backward(lt.x_mid, lt.inv_rms2, params + w.mlp_norm, dn, dx_mid, grad.data() + w.mlp_norm);

        dx = dx_mid;
        if (lt.ablated) continue;
        kernels::matmul_at_acc(lt.ctx.ref(), dx_mid.ref(), grad_ref(grad, w.wo, d, d));
        kernels::matmul_bt(dx_mid.ref(), weight(model, w.wo, d, d), dctx.ref());
        attention_backward(c, batch, lt, dctx, dq, dk, dv);
        rotate_rows(c, batch, dq, true);
        rotate_rows(c, batch, dk, true);
        kernels::matmul_at_acc(lt.n1.ref(), dq.ref(), grad_ref(grad, w.wq, d, d));
        kernels::matmul_at_acc(lt.n1.ref(), dk.ref(), grad_ref(grad, w.wk, d, d));
        kernels::matmul_at_acc(lt.n1.ref(), dv.ref(), grad_ref(grad, w.wv, d, d));
        Matrix part(n, d);
        kernels::matmul_bt(dq.ref(), weight(model, w.wq, d, d), dn.ref());
        kernels::matmul_bt(dk.ref(), weight(model, w.wk, d, d), part.ref());
        for (std::size_t i = 0; i < dn.values().size(); ++i) dn.values()[i] += part.values()[i];
        kernels::matmul_bt(dv.ref(), weight(model, w.wv, d, d), part.ref());
        for (std::size_t i = 0; i < dn.values().size(); ++i) dn.values()[i] += part.values()[i];
        rms_norm_backward(lt.x_in, lt.inv_rms1, params + w.attn_norm, dn, dx, grad.data() + w.attn_norm);
    }

    double* demb = grad.data() + model.embedding_offset();
    for (std::size_t i = 0; i < n; ++i) {
        double* row = demb + static_cast<std::size_t>(batch.tokens[i]) * d;
        const auto src = dx.row(i);
        for (std::size_t j = 0; j < d; ++j) row[j] += src[j];
    }
    return loss;
}

}  // namespace engine

namespace {

ResidualCache cache_from_tape(const engine::Tape& tape, int n_layers, std::size_t len, std::size_t d) {
    ResidualCache cache(n_layers, static_cast<int>(len), static_cast<int>(d));
    for (int l = tape.start_layer; l < n_layers; ++l) {
        const auto& lt = tape.layers[static_cast<std::size_t>(l)];
        const Matrix& post_mlp = (l + 1 < n_layers) ? tape.layers[static_cast<std::size_t>(l + 1)].x_in : tape.x_final;
        for (std::size_t p = 0; p < len; ++p) {
            const int pos = static_cast<int>(p);
            std::ranges::copy(lt.x_in.row(p), cache.at(l, CapturePoint::BlockInput, pos).begin());
            std::ranges::copy(lt.x_mid.row(p), cache.at(l, CapturePoint::PostAttention, pos).begin());
            std::ranges::copy(post_mlp.row(p), cache.at(l, CapturePoint::PostMlp, pos).begin());
            std::ranges::copy(lt.attn_out.row(p), cache.attention_output(l, pos).begin());
            std::ranges::copy(lt.mlp_out.row(p), cache.mlp_output(l, pos).begin());
        }
    }
    return cache;
}

ForwardResult run(const ModelBundle& model, const engine::Batch& batch, std::span<const HookSpec> hooks, bool capture,
                  int start_layer, const Matrix* start_input) {
    engine::Tape tape;
    engine::forward_batch(model, batch, hooks, tape, start_layer, start_input);
    ForwardResult result;
    if (capture) {
        result.cache = cache_from_tape(tape, model.config().n_layers, batch.rows(),
                                       static_cast<std::size_t>(model.config().d_model));
    }
    result.logits = std::move(tape.logits);
    return result;
}

}  // namespace

ForwardResult forward(const ModelBundle& model, std::span<const int> tokens, std::span<const HookSpec> hooks,
                      bool capture) {
    if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
    engine::Batch batch;
    batch.add(tokens);
    return run(model, batch, hooks, capture, 0, nullptr);
}

ForwardResult forward_from_layer(const ModelBundle& model, int layer, ConstMatRef block_input,
                                 std::span<const HookSpec> hooks, bool capture) {
    const ModelConfig& c = model.config();
    if (layer < 0 || layer >= c.n_layers) throw std::invalid_argument("forward_from_layer: layer out of range");
    if (block_input.cols != static_cast<std::size_t>(c.d_model) || block_input.rows == 0) {
        throw std::invalid_argument("forward_from_layer: block input has wrong shape");
    }
    engine::Batch batch;
    batch.tokens.assign(block_input.rows, vocab::kPad);
    batch.offsets.push_back(block_input.rows);
    Matrix start(block_input.rows, block_input.cols);
    std::copy_n(block_input.data, block_input.rows * block_input.cols, start.values().data());
    return run(model, batch, hooks, capture, layer, &start);
}

std::vector<double> unembed(const ModelBundle& model, std::span<const double> residual) {
    const ModelConfig& c = model.config();
    const auto d = static_cast<std::size_t>(c.d_model), vs = static_cast<std::size_t>(c.vocab_size);
    if (residual.size() != d) throw std::invalid_argument("unembed: residual has wrong dimension");
    Matrix x(1, d), nf;
    std::ranges::copy(residual, x.row(0).begin());
    std::vector<double> inv;
    engine::rms_norm(x, model.parameters().data() + model.final_norm_offset(), nf, inv);
    Matrix logits(1, vs);
    kernels::matmul(nf.ref(), engine::weight(model, model.unembedding_offset(), d, vs), logits.ref());
    return logits.values();
}

int argmax(std::span<const double> values) {
    int best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    }
    return best;
}

int predict_answer(const ModelBundle& model, std::string_view prompt) {
    const auto tokens = tokenize(prompt);
    const auto result = forward(model, tokens);
    return argmax(result.logits.row(result.logits.rows() - 1));
}

}  // namespace arithlens
