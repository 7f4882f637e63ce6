#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "arithlens/exprgen.hpp"
#include "arithlens/model.hpp"

namespace arithlens {

/// Optimizer schedule. Loaded from a JSON file whose keys match the field names.
struct TrainConfig {
    double lr = 2e-3;
    std::int64_t steps = 6000;
    int batch_size = 32;
    std::uint64_t seed = 7;
    double split_fraction = 0.9;  // fraction of the dataset used for training
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double adam_eps = 1e-8;
    std::int64_t warmup_steps = 200;
    std::int64_t eval_every = 0;  // 0: once per epoch

    void validate() const;
    static TrainConfig from_file(const std::string& path);
    static TrainConfig from_json_text(const std::string& text);
    std::string to_json() const;
};

class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct DataSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> heldout;
};

/// Seeded permutation; the first round(n * fraction) indices train.
DataSplit split_dataset(std::size_t n, double train_fraction, std::uint64_t seed);

/// Tokens of "text + answer": BOS-prefixed prompt followed by the final value.
std::vector<int> training_sequence(const Expression& e);

/// Final-position argmax for every prompt, evaluated in packed batches.
std::vector<int> predict_answers(const ModelBundle& model, std::span<const Expression> prompts);

/// Fraction of prompts whose predicted token equals the final value.
/// Prompts whose final-position argmax is the correct answer, in input order.
std::vector<Expression> correct_subset(const ModelBundle& model, std::span<const Expression> prompts);

double answer_accuracy(const ModelBundle& model, std::span<const Expression> prompts);

struct TrainMetric {
    std::int64_t step = 0;
    int epoch = 0;
    double train_loss = 0.0;  // mean over the steps since the previous record
    double heldout_accuracy = 0.0;
    double seconds = 0.0;
};

struct TrainResult {
    ModelBundle model;
    std::vector<TrainMetric> trace;
    DataSplit split;
};

/// Next-token cross-entropy over whole sequences with AdamW, linear warmup
/// and cosine decay. Deterministic for a fixed seed and single-threaded run.
TrainResult train(ModelBundle model, std::span<const Expression> dataset, const TrainConfig& config,
                  const std::function<void(const TrainMetric&)>& on_metric = {});

struct GradCheckOptions {
    double epsilon = 1e-4;
    std::size_t samples = 100;
    std::uint64_t seed = 0;
    /// Denominator floor for the relative error, so near-zero gradients compare absolutely.
    double floor = 1e-6;
    /// Test hook: perturb the analytic gradient of this parameter before comparing.
    std::optional<std::size_t> inject_error_at;
};

struct GradCheckResult {
    double max_relative_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t checked = 0;
    std::size_t worst_index = 0;
};

/// Compares analytic gradients of the sequence loss with central finite differences.
GradCheckResult grad_check(const ModelBundle& model, std::span<const int> sequence,
                           const GradCheckOptions& options = {});

}  // namespace arithlens
