#include "arithlens/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "arithlens/engine.hpp"

namespace arithlens {

void TrainConfig::validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("train config: lr must be >= 0");
    if (steps < 0) throw std::invalid_argument("train config: steps must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
    if (!(split_fraction > 0.0 && split_fraction < 1.0)) {
        throw std::invalid_argument("train config: split_fraction must be in (0, 1)");
    }
    if (weight_decay < 0.0) throw std::invalid_argument("train config: weight_decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
        throw std::invalid_argument("train config: betas must be in [0, 1)");
    }
    if (warmup_steps < 0 || eval_every < 0) throw std::invalid_argument("train config: negative schedule value");
}

TrainConfig TrainConfig::from_json_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("train config: ") + e.what());
    }
    TrainConfig c;
    for (const auto& [key, value] : j.items()) {
        if (key == "lr") c.lr = value.get<double>();
        else if (key == "steps") c.steps = value.get<std::int64_t>();
        else if (key == "batch_size") c.batch_size = value.get<int>();
        else if (key == "seed") c.seed = value.get<std::uint64_t>();
        else if (key == "split_fraction") c.split_fraction = value.get<double>();
        else if (key == "weight_decay") c.weight_decay = value.get<double>();
        else if (key == "beta1") c.beta1 = value.get<double>();
        else if (key == "beta2") c.beta2 = value.get<double>();
        else if (key == "adam_eps") c.adam_eps = value.get<double>();
        else if (key == "warmup_steps") c.warmup_steps = value.get<std::int64_t>();
        else if (key == "eval_every") c.eval_every = value.get<std::int64_t>();
        else throw std::invalid_argument("train config: unknown key '" + key + "'");
    }
    c.validate();
    return c;
}

TrainConfig TrainConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open train config " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str());
}

std::string TrainConfig::to_json() const {
    nlohmann::ordered_json j;
    j["lr"] = lr;
    j["steps"] = steps;
    j["batch_size"] = batch_size;
    j["seed"] = seed;
    j["split_fraction"] = split_fraction;
    j["weight_decay"] = weight_decay;
    j["beta1"] = beta1;
    j["beta2"] = beta2;
    j["adam_eps"] = adam_eps;
    j["warmup_steps"] = warmup_steps;
    j["eval_every"] = eval_every;
    return j.dump(2);
}

DataSplit split_dataset(std::size_t n, double train_fraction, std::uint64_t seed) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * train_fraction));
    DataSplit split;
    split.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.heldout.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
    return split;
}

std::vector<int> training_sequence(const Expression& e) {
    auto tokens = tokenize(e.text);
    const auto answer = vocab::integer_token(e.final_value);
    if (!answer) throw std::invalid_argument("final value outside the vocabulary: " + e.text);
    tokens.push_back(*answer);
    return tokens;
}

std::vector<int> predict_answers(const ModelBundle& model, std::span<const Expression> prompts) {
    constexpr std::size_t kChunk = 256;
    std::vector<int> out(prompts.size());
    engine::Tape tape;
    for (std::size_t start = 0; start < prompts.size(); start += kChunk) {
        const std::size_t end = std::min(prompts.size(), start + kChunk);
        engine::Batch batch;
        for (std::size_t i = start; i < end; ++i) batch.add(tokenize(prompts[i].text));
        engine::forward_batch(model, batch, {}, tape);
        for (std::size_t s = 0; s < batch.sequences(); ++s) {
            out[start + s] = argmax(tape.logits.row(batch.offsets[s + 1] - 1));
        }
    }
    return out;
}

std::vector<Expression> correct_subset(const ModelBundle& model, std::span<const Expression> prompts) {
    const auto predictions = predict_answers(model, prompts);
    std::vector<Expression> out;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        if (predictions[i] == prompts[i].final_value) out.push_back(prompts[i]);
    }
    return out;
}

double answer_accuracy(const ModelBundle& model, std::span<const Expression> prompts) {
    if (prompts.empty()) return 0.0;
    const auto predictions = predict_answers(model, prompts);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        correct += predictions[i] == prompts[i].final_value ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(prompts.size());
}

namespace {

double scheduled_lr(const TrainConfig& c, std::int64_t step) {
    if (c.warmup_steps > 0 && step < c.warmup_steps) {
        return c.lr * static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps);
    }
    const std::int64_t decay_steps = std::max<std::int64_t>(1, c.steps - c.warmup_steps);
    const double progress = static_cast<double>(step - c.warmup_steps) / static_cast<double>(decay_steps);
    return c.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, progress)));
}

// Norm gains are not decayed.
std::vector<char> decay_mask(const ModelBundle& model) {
    std::vector<char> mask(model.parameters().size(), 1);
    for (const auto& t : model.layout().tensors()) {
        if (t.shape.size() == 1) std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(t.offset), t.size, 0);
    }
    return mask;
}

}  // namespace

TrainResult train(ModelBundle model, std::span<const Expression> dataset, const TrainConfig& config,
                  const std::function<void(const TrainMetric&)>& on_metric) {
    config.validate();
    if (dataset.empty()) throw std::invalid_argument("train: dataset is empty");

    TrainResult result{std::move(model), {}, split_dataset(dataset.size(), config.split_fraction, config.seed)};
    ModelBundle& m = result.model;
    const auto& split = result.split;
    if (split.train.empty()) throw std::invalid_argument("train: split leaves no training data");

    std::vector<std::vector<int>> sequences;
    sequences.reserve(dataset.size());
    for (const auto& e : dataset) sequences.push_back(training_sequence(e));
    std::vector<Expression> heldout;
    for (auto i : split.heldout) heldout.push_back(dataset[i]);

    auto params = m.parameters();
    const std::size_t n_params = params.size();
    std::vector<double> grad(n_params), m1(n_params, 0.0), m2(n_params, 0.0);
    const auto mask = decay_mask(m);

    std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::size_t> order = split.train;
    std::size_t cursor = order.size();
    int epoch = 0;

    const auto t0 = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    std::int64_t loss_count = 0;
    engine::Tape tape;
    const auto batch_size = static_cast<std::size_t>(config.batch_size);

    auto record = [&](std::int64_t step) {
        TrainMetric metric;
        metric.step = step;
        metric.epoch = epoch;
        metric.train_loss = loss_count > 0 ? loss_sum / static_cast<double>(loss_count) : 0.0;
        metric.heldout_accuracy = answer_accuracy(m, heldout);
        metric.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.trace.push_back(metric);
        if (on_metric) on_metric(metric);
        loss_sum = 0.0;
        loss_count = 0;
    };

    for (std::int64_t step = 0; step < config.steps; ++step) {
        if (cursor >= order.size()) {
            if (step > 0 && config.eval_every == 0) record(step);
            std::shuffle(order.begin(), order.end(), rng);
            cursor = 0;
            ++epoch;
        }
        engine::Batch batch;
        std::vector<int> targets;
        for (std::size_t b = 0; b < batch_size && cursor < order.size(); ++b, ++cursor) {
            const auto& seq = sequences[order[cursor]];
            // inputs are all tokens but the last; each row predicts its successor
            batch.add(std::span<const int>(seq).first(seq.size() - 1));
            for (std::size_t i = 1; i < seq.size(); ++i) targets.push_back(seq[i]);
        }
        std::fill(grad.begin(), grad.end(), 0.0);
        const double loss = engine::loss_and_grad(m, batch, targets, tape, grad);
        if (!std::isfinite(loss)) {
            throw DivergenceError("training diverged at step " + std::to_string(step) +
                                  ": loss is not finite (lr=" + std::to_string(config.lr) + ")");
        }
        loss_sum += loss;
        ++loss_count;

        const double lr = scheduled_lr(config, step);
        const double t = static_cast<double>(step + 1);
        const double c1 = 1.0 - std::pow(config.beta1, t);
        const double c2 = 1.0 - std::pow(config.beta2, t);
        for (std::size_t i = 0; i < n_params; ++i) {
            const double g = grad[i];
            m1[i] = config.beta1 * m1[i] + (1.0 - config.beta1) * g;
            m2[i] = config.beta2 * m2[i] + (1.0 - config.beta2) * g * g;
            const double update = (m1[i] / c1) / (std::sqrt(m2[i] / c2) + config.adam_eps);
            const double decay = mask[i] ? config.weight_decay * params[i] : 0.0;
            params[i] -= lr * (update + decay);
        }
        if (config.eval_every > 0 && (step + 1) % config.eval_every == 0) record(step + 1);
    }
    if (config.eval_every == 0 || config.steps % config.eval_every != 0 || config.steps == 0) record(config.steps);

    m.meta.dataset_hash = dataset_hash(dataset);
    m.meta.steps = config.steps;
    m.meta.heldout_accuracy = result.trace.empty() ? 0.0 : result.trace.back().heldout_accuracy;
    return result;
}

GradCheckResult grad_check(const ModelBundle& model, std::span<const int> sequence, const GradCheckOptions& options) {
    if (sequence.size() < 2) throw std::invalid_argument("grad_check: sequence needs at least two tokens");
    engine::Batch batch;
    batch.add(sequence.first(sequence.size() - 1));
    const std::vector<int> targets(sequence.begin() + 1, sequence.end());

    ModelBundle probe = model;
    engine::Tape tape;
    std::vector<double> grad(probe.parameters().size(), 0.0);
    engine::loss_and_grad(probe, batch, targets, tape, grad);
    if (options.inject_error_at) grad.at(*options.inject_error_at) += 1.0;

    auto loss_at = [&]() {
        engine::forward_batch(probe, batch, {}, tape);
        return engine::cross_entropy(tape, targets);
    };

    std::mt19937_64 rng(options.seed);
    std::uniform_int_distribution<std::size_t> pick(0, grad.size() - 1);
    std::vector<std::size_t> indices;
    if (options.inject_error_at) indices.push_back(*options.inject_error_at);
    while (indices.size() < options.samples) indices.push_back(pick(rng));

    GradCheckResult result;
    auto params = probe.parameters();
    for (std::size_t idx : indices) {
        const double saved = params[idx];
        params[idx] = saved + options.epsilon;
        const double up = loss_at();
        params[idx] = saved - options.epsilon;
        const double down = loss_at();
        params[idx] = saved;
        const double numeric = (up - down) / (2.0 * options.epsilon);
        const double abs_err = std::abs(numeric - grad[idx]);
        const double rel = abs_err / std::max({std::abs(numeric), std::abs(grad[idx]), options.floor});
        if (rel > result.max_relative_error) {
            result.max_relative_error = rel;
            result.worst_index = idx;
        }
        result.max_abs_error = std::max(result.max_abs_error, abs_err);
        ++result.checked;
    }
    return result;
}

}  // namespace arithlens
