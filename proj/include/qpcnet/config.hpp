#pragma once

// Declarative run configuration shared by every CLI subcommand.
//
// {
//   "physics":  { "omega_values": [...], "gamma_up_values": [...], "gamma_down_values": [...],
//                 "duration_us": 50, "dt_us": 0.01, "mode": "markovian",
//                 "noise": { "sigma_bin": 0.25, "filter_tau_us": 0.2, "sigma_extra": 0.1 } },
//   "dataset":  { "batch_size": 1000, "batch_count": 25, "eval_batch_size": 1000,
//                 "seed": 1, "workers": 1 },
//   "model":    { "kernel": 9, "conv1_filters": 16, "conv2_filters": 32,
//                 "dense_units": 1024, "dropout_rate": 0.4 },
//   "training": { "steps_per_batch": 250, "total_steps": 6250, "eval_every": 250, "seed": 7,
//                 "learning_rate": 1e-4, "beta1": 0.9, "beta2": 0.999, "epsilon": 1e-8 },
//   "bayes":    { "sigma_bin": 0.25, "checkpoints_us": [1, 10, 100, 500], "substeps": 4, "workers": 1 }
// }
//
// Every field is optional; missing fields take the defaults above.

#include <string>
#include <vector>

#include <json.hpp>

#include "qpcnet/bayes.hpp"
#include "qpcnet/dataset.hpp"
#include "qpcnet/estimator.hpp"
#include "qpcnet/nn.hpp"
#include "qpcnet/sim.hpp"

namespace qpcnet::config {

using Json = nlohmann::ordered_json;

struct PhysicsConfig {
    dataset::ParamGrid grid;
    double duration = 50.0;  // us
    double dt = sim::kDefaultDt;
    sim::Mode mode = sim::Mode::Markovian;
    sim::NoiseConfig noise;
};

struct DatasetConfig {
    std::size_t batch_size = 1000;
    std::size_t batch_count = 25;
    std::size_t eval_batch_size = 1000;
    std::uint64_t seed = 1;
    unsigned workers = 1;
};

struct RunConfig {
    PhysicsConfig physics;
    DatasetConfig dataset;
    nn::ModelConfig model;  // input_len and classes follow physics
    estimator::TrainConfig training;
    bayes::FilterOptions bayes;

    /// Trace length N = duration / dt.
    std::size_t trace_len() const;
    dataset::BatchSpec batch_spec(std::size_t batch_size) const;

    /// Field-level consistency checks; throws ConfigError.
    void validate() const;
};

/// Parses and validates. Unknown keys are rejected so typos surface.
RunConfig from_json(const Json& json);
Json to_json(const RunConfig& config);

RunConfig load(const std::string& path);

/// Applies "dotted.path=value" overrides; values parse as JSON when possible,
/// otherwise as strings.
void apply_overrides(Json& json, const std::vector<std::string>& overrides);

/// Seed of training batch `index` and of the evaluation batch.
std::uint64_t batch_seed(const DatasetConfig& config, std::size_t index);
std::uint64_t eval_seed(const DatasetConfig& config);

}  // namespace qpcnet::config
