#pragma once

// Training and evaluation harness: streams batches, runs a fixed number of
// optimizer steps per batch, and scores predictions by fidelity and average
// distance.

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qpcnet/checkpoint.hpp"
#include "qpcnet/dataset.hpp"
#include "qpcnet/nn.hpp"

namespace qpcnet::estimator {

using dataset::LabelIndices;
using dataset::LabeledBatch;
using dataset::ParamGrid;

struct TrainConfig {
    std::size_t steps_per_batch = 250;
    std::size_t total_steps = 6250;
    std::size_t eval_every = 250;
    std::uint64_t seed = 0;
    nn::AdamConfig adam;
    std::filesystem::path eval_batch_path;

    void validate() const;
    /// Number of distinct training batches the schedule consumes.
    std::size_t batches_needed() const;
};

struct MetricRecord {
    std::size_t step = 0;
    double loss = 0.0;
    double fidelity = 0.0;
    double avg_distance = 0.0;  // MHz

    bool operator==(const MetricRecord&) const = default;
};

struct MetricsLog {
    std::vector<MetricRecord> records;

    /// Throws if `record.step` does not increase.
    void append(const MetricRecord& record);
    std::string to_csv() const;
    static MetricsLog from_csv(const std::string& text);
    void write_csv(const std::filesystem::path& path) const;
    static MetricsLog read_csv(const std::filesystem::path& path);

    bool operator==(const MetricsLog&) const = default;
};

inline constexpr std::string_view kMetricsHeader = "step,loss,fidelity,avg_distance_mhz";

/// Argmax per head, ties to the lowest index. probs is [M x 3 x K].
std::vector<LabelIndices> argmax_indices(const nn::Tensor<float>& probs);

/// Fraction of (trace, parameter) pairs whose argmax equals the truth.
double fidelity(const nn::Tensor<float>& probs, std::span<const LabelIndices> truth);

/// Mean absolute gap (MHz) between each head's expected candidate value and
/// the true value, averaged over traces and the three parameters.
double avg_distance(const nn::Tensor<float>& probs, std::span<const LabelIndices> truth, const ParamGrid& grid);

struct Evaluation {
    double loss = 0.0;
    double fidelity = 0.0;
    double avg_distance = 0.0;
};

/// Inference-mode forward pass over the whole batch; all three metrics come
/// from the same probabilities.
Evaluation evaluate(const nn::Network<float>& net, const LabeledBatch& batch);

/// Checks that the batch fits the model (trace length, square grid of K).
void check_compatible(const nn::ModelConfig& model, const LabeledBatch& batch);

struct TrainResult {
    nn::Checkpoint checkpoint;
    MetricsLog log;
};

using BatchSource = std::function<const LabeledBatch&(std::size_t batch_index)>;
using EvalCallback = std::function<void(const MetricRecord&)>;

/// Core loop over an arbitrary batch source. Step s trains on batch
/// s / steps_per_batch with dropout seeded from (seed, s). Evaluates at step 0
/// (fresh runs only), every eval_every steps and after the last step.
TrainResult train_on(const TrainConfig& config, const nn::ModelConfig& model, const BatchSource& source,
                     const LabeledBatch& eval_batch, std::optional<nn::Checkpoint> resume = std::nullopt,
                     const EvalCallback& on_eval = {});

/// Sorted *.qdb files of a training directory.
std::vector<std::filesystem::path> list_batch_files(const std::filesystem::path& dir);

/// Streams batch files from `train_dir` one at a time. Every file the
/// schedule needs is header-checked before the first step.
TrainResult train(const TrainConfig& config, const std::filesystem::path& train_dir, const nn::ModelConfig& model,
                  std::optional<nn::Checkpoint> resume = std::nullopt, const EvalCallback& on_eval = {});

struct Prediction {
    std::array<std::vector<double>, 3> distributions;
    LabelIndices indices{};
    sim::TrajectoryParams params;
};

/// Single-trace (M = 1) prediction.
Prediction predict(const nn::Network<float>& net, std::span<const float> trace, const ParamGrid& grid);

}  // namespace qpcnet::estimator
