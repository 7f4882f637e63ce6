#include "arithlens/analysis.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "arithlens/engine.hpp"
#include "arithlens/train.hpp"
#include "arithlens/vocab.hpp"

namespace arithlens {

std::vector<TokenLogit> top_k(std::span<const double> logits, int k) {
    std::vector<int> order(logits.size());
    std::iota(order.begin(), order.end(), 0);
    const auto kk = static_cast<std::size_t>(std::clamp<int>(k, 0, static_cast<int>(logits.size())));
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(kk), order.end(), [&](int a, int b) {
        const double la = logits[static_cast<std::size_t>(a)], lb = logits[static_cast<std::size_t>(b)];
        return la != lb ? la > lb : a < b;
    });
    std::vector<TokenLogit> out;
    out.reserve(kk);
    for (std::size_t i = 0; i < kk; ++i) out.push_back({order[i], logits[static_cast<std::size_t>(order[i])]});
    return out;
}

std::string_view component_name(Component c) {
    switch (c) {
        case Component::Attention: return "attention";
        case Component::Mlp: return "mlp";
        case Component::Neither: return "neither";
    }
    return "?";
}

const LensEntry& LensReport::at(int layer, CapturePoint point) const {
    if (layer < 0 || layer >= n_layers) throw std::out_of_range("LensReport: layer out of range");
    return entries[static_cast<std::size_t>(layer * kCapturePoints + static_cast<int>(point))];
}

LensReport logit_lens(const ResidualCache& cache, const ModelBundle& model, int topk) {
    const ModelConfig& c = model.config();
    if (cache.n_layers() != c.n_layers || cache.d_model() != c.d_model) {
        throw AnalysisError("logit_lens: cache shape does not match the model");
    }
    if (topk < 1) throw AnalysisError("logit_lens: topk must be positive");
    LensReport report;
    report.n_layers = c.n_layers;
    report.topk = topk;
    const int last = cache.seq_len() - 1;
    for (int l = 0; l < c.n_layers; ++l) {
        for (CapturePoint point : kAllCapturePoints) {
            const auto logits = unembed(model, cache.at(l, point, last));
            report.entries.push_back({l, point, top_k(logits, topk)});
        }
    }
    return report;
}

bool Detection::any() const { return std::ranges::find(in_topk, true) != in_topk.end(); }

namespace {

int intermediate_token(const Expression& expr) {
    const auto tok = vocab::integer_token(expr.intermediate);
    if (!tok) throw AnalysisError("intermediate value " + std::to_string(expr.intermediate) + " has no token");
    return *tok;
}

Component attribute_from_cache(const ResidualCache& cache, const ModelBundle& model, int token, int layer) {
    const int last = cache.seq_len() - 1;
    const auto rank1 = [&](CapturePoint point) { return argmax(unembed(model, cache.at(layer, point, last))) == token; };
    if (!rank1(CapturePoint::PostMlp)) {
        throw AnalysisError("attribute_component: intermediate is not top-1 after layer " + std::to_string(layer));
    }
    if (rank1(CapturePoint::BlockInput)) return Component::Neither;
    if (rank1(CapturePoint::PostAttention)) return Component::Attention;
    return Component::Mlp;
}

}  // namespace

Detection detect_intermediate(const LensReport& report, const Expression& expr) {
    Detection d;
    d.token = intermediate_token(expr);
    d.degenerate = expr.degenerate();
    for (int l = 0; l < report.n_layers; ++l) {
        const auto& top = report.at(l, CapturePoint::PostMlp).top;
        const bool present = std::ranges::any_of(top, [&](const TokenLogit& t) { return t.token == d.token; });
        const bool first = !top.empty() && top.front().token == d.token;
        d.in_topk.push_back(present);
        d.is_top1.push_back(first);
        if (first && !d.first_layer_top1) d.first_layer_top1 = l;
    }
    return d;
}

Component attribute_component(const ModelBundle& model, const Expression& expr, int layer) {
    const ResidualCache cache = capture(model, expr.text);
    const auto detection = detect_intermediate(logit_lens(cache, model, 1), expr);
    if (detection.first_layer_top1 != layer) {
        throw AnalysisError("attribute_component: layer " + std::to_string(layer) +
                            " is not the first layer where the intermediate is top-1");
    }
    return attribute_from_cache(cache, model, detection.token, layer);
}

std::string_view position_selector_name(PositionSelector s) {
    switch (s) {
        case PositionSelector::Equals: return "equals";
        case PositionSelector::FirstOperator: return "operator1";
        case PositionSelector::SecondOperator: return "operator2";
    }
    return "?";
}

PositionSelector position_selector_from_name(std::string_view name) {
    for (auto s : {PositionSelector::Equals, PositionSelector::FirstOperator, PositionSelector::SecondOperator}) {
        if (position_selector_name(s) == name) return s;
    }
    throw AnalysisError("unknown position selector '" + std::string(name) + "'");
}

int select_position(const Expression& expr, PositionSelector selector) {
    switch (selector) {
        case PositionSelector::Equals: return static_cast<int>(tokenize(expr.text).size()) - 1;
        case PositionSelector::FirstOperator: return expr.operator_positions()[0];
        case PositionSelector::SecondOperator: return expr.operator_positions()[1];
    }
    return 0;
}

Matrix collect_activations(const ModelBundle& model, std::span<const Expression> prompts, ActivationRequest site,
                           const std::function<std::vector<int>(const Expression&)>& positions) {
    const ModelConfig& c = model.config();
    if (site.layer < 0 || site.layer >= c.n_layers) throw AnalysisError("collect_activations: layer out of range");
    const auto d = static_cast<std::size_t>(c.d_model);
    constexpr std::size_t kChunk = 256;
    std::vector<std::vector<double>> rows;
    engine::Tape tape;
    for (std::size_t start = 0; start < prompts.size(); start += kChunk) {
        const std::size_t end = std::min(prompts.size(), start + kChunk);
        engine::Batch batch;
        for (std::size_t i = start; i < end; ++i) batch.add(tokenize(prompts[i].text));
        engine::forward_batch(model, batch, {}, tape);
        const auto& lt = tape.layers[static_cast<std::size_t>(site.layer)];
        const Matrix* source = &lt.x_in;
        if (site.point == CapturePoint::PostAttention) source = &lt.x_mid;
        if (site.point == CapturePoint::PostMlp) {
            source = site.layer + 1 < c.n_layers ? &tape.layers[static_cast<std::size_t>(site.layer + 1)].x_in
                                                 : &tape.x_final;
        }
        for (std::size_t s = 0; s < batch.sequences(); ++s) {
            for (int pos : positions(prompts[start + s])) {
                if (pos < 0 || static_cast<std::size_t>(pos) >= batch.length(s)) {
                    throw AnalysisError("collect_activations: position out of range");
                }
                const auto r = source->row(batch.offsets[s] + static_cast<std::size_t>(pos));
                rows.emplace_back(r.begin(), r.end());
            }
        }
    }
    Matrix out(rows.size(), d);
    for (std::size_t i = 0; i < rows.size(); ++i) std::ranges::copy(rows[i], out.row(i).begin());
    return out;
}

std::vector<int> precedence_labels(std::span<const Expression> prompts) {
    std::vector<int> y;
    y.reserve(prompts.size() * 2);
    for (const auto& e : prompts) {
        for (const auto& label : e.labels) y.push_back(label.precedence_rank == 1 ? 0 : 1);
    }
    return y;
}

std::vector<int> operator_positions_of(const Expression& e) {
    const auto pos = e.operator_positions();
    return {pos[0], pos[1]};
}

namespace {

using EMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EVector = Eigen::VectorXd;

EMatrix gather_rows(ConstMatRef x, std::span<const std::size_t> idx) {
    EMatrix out(static_cast<Eigen::Index>(idx.size()), static_cast<Eigen::Index>(x.cols));
    for (std::size_t i = 0; i < idx.size(); ++i) {
        for (std::size_t j = 0; j < x.cols; ++j) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = x(idx[i], j);
    }
    return out;
}

void check_split(const DataSplit& split) {
    if (split.train.empty() || split.heldout.empty()) throw AnalysisError("probe: split leaves an empty side");
}

// Mean logistic loss plus ridge on all coefficients (the last one is the intercept).
double logistic_objective(const EMatrix& x, const EVector& y, const EVector& w, double ridge) {
    const EVector z = x * w;
    double loss = 0.0;
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        const double m = y(i) > 0.5 ? z(i) : -z(i);
        loss += m > 0 ? std::log1p(std::exp(-m)) : -m + std::log1p(std::exp(m));
    }
    return loss / static_cast<double>(z.size()) + 0.5 * ridge * w.squaredNorm();
}

}  // namespace

ProbeReport fit_linear_probe(ConstMatRef x, std::span<const double> y, const ProbeOptions& options) {
    if (x.rows != y.size()) throw AnalysisError("linear probe: X and y have different lengths");
    if (x.rows < 50) throw AnalysisError("linear probe: at least 50 samples are required");
    const DataSplit split = split_dataset(x.rows, options.train_fraction, options.seed);
    check_split(split);

    const EMatrix xtr = gather_rows(x, split.train);
    EVector ytr(static_cast<Eigen::Index>(split.train.size()));
    for (std::size_t i = 0; i < split.train.size(); ++i) ytr(static_cast<Eigen::Index>(i)) = y[split.train[i]];

    const Eigen::RowVectorXd mean = xtr.colwise().mean();
    const double ymean = ytr.mean();
    const EMatrix xc = xtr.rowwise() - mean;
    const EVector yc = ytr.array() - ymean;
    EMatrix gram = xc.transpose() * xc;
    gram.diagonal().array() += options.ridge;
    const EVector w = gram.ldlt().solve(xc.transpose() * yc);
    const double intercept = ymean - mean.dot(w);

    const EMatrix xte = gather_rows(x, split.heldout);
    EVector yte(static_cast<Eigen::Index>(split.heldout.size()));
    for (std::size_t i = 0; i < split.heldout.size(); ++i) yte(static_cast<Eigen::Index>(i)) = y[split.heldout[i]];
    const EVector pred = (xte * w).array() + intercept;
    const double ss_res = (yte - pred).squaredNorm();
    const double ss_tot = (yte.array() - yte.mean()).matrix().squaredNorm();
    if (!(ss_tot > 0.0)) throw AnalysisError("linear probe: held-out targets have zero variance");

    ProbeReport report;
    report.kind = ProbeKind::LinearR2;
    report.metric = 1.0 - ss_res / ss_tot;
    report.n_train = split.train.size();
    report.n_test = split.heldout.size();
    report.seed = options.seed;
    if (!std::isfinite(report.metric)) throw std::domain_error("linear probe: non-finite R^2");
    return report;
}

ProbeReport fit_logistic_probe(ConstMatRef x, std::span<const int> y, const ProbeOptions& options) {
    if (x.rows != y.size()) throw AnalysisError("logistic probe: X and y have different lengths");
    if (x.rows < 2) throw AnalysisError("logistic probe: too few samples");
    if (std::ranges::any_of(y, [](int v) { return v != 0 && v != 1; })) {
        throw AnalysisError("logistic probe: labels must be 0 or 1");
    }
    const auto positives = std::ranges::count(y, 1);
    if (positives == 0 || positives == static_cast<std::ptrdiff_t>(y.size())) {
        throw AnalysisError("logistic probe: labels contain a single class");
    }
    const DataSplit split = split_dataset(x.rows, options.train_fraction, options.seed);
    check_split(split);

    const auto with_intercept = [&](std::span<const std::size_t> idx) {
        EMatrix m(static_cast<Eigen::Index>(idx.size()), static_cast<Eigen::Index>(x.cols + 1));
        m.leftCols(static_cast<Eigen::Index>(x.cols)) = gather_rows(x, idx);
        m.col(static_cast<Eigen::Index>(x.cols)).setOnes();
        return m;
    };
    const EMatrix xtr = with_intercept(split.train);
    EVector ytr(xtr.rows());
    for (std::size_t i = 0; i < split.train.size(); ++i) ytr(static_cast<Eigen::Index>(i)) = y[split.train[i]];
    if (ytr.sum() == 0.0 || ytr.sum() == static_cast<double>(ytr.size())) {
        throw AnalysisError("logistic probe: training split contains a single class");
    }

    const double n = static_cast<double>(xtr.rows());
    EVector w = EVector::Zero(xtr.cols());
    double objective = logistic_objective(xtr, ytr, w, options.ridge);
    ProbeReport report;
    report.converged = false;
    for (int it = 1; it <= options.max_iterations; ++it) {
        report.iterations = it;
        const EVector z = xtr * w;
        EVector p(z.size()), weight(z.size());
        for (Eigen::Index i = 0; i < z.size(); ++i) {
            p(i) = 1.0 / (1.0 + std::exp(-z(i)));
            weight(i) = p(i) * (1.0 - p(i));
        }
        const EVector grad = xtr.transpose() * (p - ytr) / n + options.ridge * w;
        EMatrix hess = xtr.transpose() * weight.asDiagonal() * xtr / n;
        hess.diagonal().array() += options.ridge;
        const EVector step = hess.ldlt().solve(grad);

        double t = 1.0;
        EVector next = w - step;
        double next_objective = logistic_objective(xtr, ytr, next, options.ridge);
        const double slope = grad.dot(step);
        while (next_objective > objective - 1e-4 * t * slope && t > 1e-10) {
            t *= 0.5;
            next = w - t * step;
            next_objective = logistic_objective(xtr, ytr, next, options.ridge);
        }
        const double moved = (t * step).lpNorm<Eigen::Infinity>();
        w = next;
        objective = next_objective;
        if (!std::isfinite(objective)) throw std::domain_error("logistic probe: objective became non-finite");
        if (moved < options.tolerance) {
            report.converged = true;
            break;
        }
    }

    const EMatrix xte = with_intercept(split.heldout);
    const EVector z = xte * w;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < split.heldout.size(); ++i) {
        const int predicted = z(static_cast<Eigen::Index>(i)) > 0.0 ? 1 : 0;
        correct += predicted == y[split.heldout[i]] ? 1 : 0;
    }
    report.kind = ProbeKind::LogisticAccuracy;
    report.metric = static_cast<double>(correct) / static_cast<double>(split.heldout.size());
    report.n_train = split.train.size();
    report.n_test = split.heldout.size();
    report.seed = options.seed;
    return report;
}

DetectionCurve detection_curve(const ModelBundle& model, std::span<const Expression> prompts, int topk) {
    const int layers = model.config().n_layers;
    DetectionCurve curve;
    curve.topk_count.assign(static_cast<std::size_t>(layers), 0);
    curve.top1_count.assign(static_cast<std::size_t>(layers), 0);
    curve.prompts = prompts.size();
    const auto n = static_cast<std::ptrdiff_t>(prompts.size());
    std::vector<Detection> detections(prompts.size());
    std::vector<std::optional<Component>> attributions(prompts.size());
#pragma omp parallel for schedule(dynamic, 8)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        const auto& e = prompts[static_cast<std::size_t>(i)];
        const ResidualCache cache = capture(model, e.text);
        auto det = detect_intermediate(logit_lens(cache, model, topk), e);
        if (det.first_layer_top1) {
            attributions[static_cast<std::size_t>(i)] = attribute_from_cache(cache, model, det.token, *det.first_layer_top1);
        }
        detections[static_cast<std::size_t>(i)] = std::move(det);
    }
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        const auto& det = detections[i];
        for (std::size_t l = 0; l < static_cast<std::size_t>(layers); ++l) {
            curve.topk_count[l] += det.in_topk[l] ? 1 : 0;
            curve.top1_count[l] += det.is_top1[l] ? 1 : 0;
        }
        curve.detected += det.any() ? 1 : 0;
        if (const auto& a = attributions[i]) {
            curve.attention += *a == Component::Attention ? 1 : 0;
            curve.mlp += *a == Component::Mlp ? 1 : 0;
            curve.neither += *a == Component::Neither ? 1 : 0;
        }
    }
    return curve;
}

void write_lens_csv(std::ostream& out, const LensReport& report) {
    out << "layer,point,rank,token,lexeme,logit\n";
    const auto old = out.precision(17);
    for (const auto& e : report.entries) {
        for (std::size_t r = 0; r < e.top.size(); ++r) {
            out << e.layer << ',' << capture_point_name(e.point) << ',' << r + 1 << ',' << e.top[r].token << ','
                << vocab::lexeme(e.top[r].token) << ',' << e.top[r].logit << '\n';
        }
    }
    out.precision(old);
}

void write_detection_csv(std::ostream& out, const DetectionCurve& curve) {
    out << "layer,topk_count,top1_count,prompts,topk_rate,top1_rate\n";
    const double n = curve.prompts > 0 ? static_cast<double>(curve.prompts) : 1.0;
    for (std::size_t l = 0; l < curve.topk_count.size(); ++l) {
        out << l << ',' << curve.topk_count[l] << ',' << curve.top1_count[l] << ',' << curve.prompts << ','
            << static_cast<double>(curve.topk_count[l]) / n << ',' << static_cast<double>(curve.top1_count[l]) / n
            << '\n';
    }
}

void write_probe_csv_header(std::ostream& out) {
    out << "kind,layer,point,position,metric,n_train,n_test,seed,iterations,converged\n";
}

void write_probe_csv_row(std::ostream& out, const ProbeReport& report) {
    out << (report.kind == ProbeKind::LinearR2 ? "linear_r2" : "logistic_accuracy") << ',';
    if (report.layer) out << *report.layer;
    out << ',';
    if (report.point) out << capture_point_name(*report.point);
    const auto old = out.precision(17);
    out << ',' << report.position << ',' << report.metric << ',' << report.n_train << ',' << report.n_test << ','
        << report.seed << ',' << report.iterations << ',' << (report.converged ? 1 : 0) << '\n';
    out.precision(old);
}

}  // namespace arithlens
