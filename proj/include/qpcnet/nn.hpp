#pragma once

// From-scratch 1D convolutional classifier:
//
//   [M x N x 1] -conv9(16)+relu-> [M x N x 16] -maxpool2-> [M x N/2 x 16]
//   -conv9(32)+relu-> [M x N/2 x 32] -maxpool2-> [M x N/4 x 32] -flatten->
//   [M x N/4*32] -dense(1024)+relu-> -dropout-> -dense(3K)-> softmax per head
//
// Scalars are templated so the same code trains in float and is
// gradient-checked in double. GEMMs go through CBLAS.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qpcnet/error.hpp"
#include "qpcnet/rng.hpp"

namespace qpcnet::nn {

/// Dense row-major array with explicit extents.
template <typename T>
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> extents, T fill = T{0});

    std::size_t size() const { return data.size(); }
    std::size_t dim(std::size_t axis) const { return shape.at(axis); }
    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    bool operator==(const Tensor&) const = default;
};

std::size_t element_count(const std::vector<std::size_t>& shape);

// ---- layers ---------------------------------------------------------------

/// Stride-1 cross-correlation with zero "same" padding.
/// x [M x L x Cin], kernel [K x Cin x Cout] (K odd), bias [Cout] -> [M x L x Cout].
template <typename T>
Tensor<T> conv1d_forward(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias);

/// Overwrites dkernel/dbias; returns dx unless `want_dx` is false.
template <typename T>
Tensor<T> conv1d_backward(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& dy, Tensor<T>& dkernel,
                          Tensor<T>& dbias, bool want_dx = true);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

/// dy masked where the forward output was not positive.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& out, const Tensor<T>& dy);

/// [M x L x C] -> [M x L/2 x C]; `argmax` records which of each pair won
/// (0 or 1, first wins ties).
template <typename T>
Tensor<T> maxpool2(const Tensor<T>& x, std::vector<std::uint8_t>* argmax = nullptr);

template <typename T>
Tensor<T> maxpool2_backward(const Tensor<T>& dy, const std::vector<std::uint8_t>& argmax);

/// Inverted dropout. In training each unit is zeroed with probability
/// `rate` and survivors are scaled by 1/(1-rate); `scale` receives the
/// per-unit multiplier. Outside training this is the identity.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng, bool training, std::vector<T>* scale = nullptr);

/// x [M x F], w [F x U], b [U] -> x w + b.
template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

template <typename T>
Tensor<T> dense_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, Tensor<T>& dw, Tensor<T>& db,
                         bool want_dx = true);

/// logits [M x 3K] -> probabilities [M x 3 x K], one max-shifted softmax per head.
template <typename T>
Tensor<T> softmax_heads(const Tensor<T>& logits, std::size_t classes);

inline constexpr double kProbabilityFloor = 1e-12;

/// Mean over traces of the summed per-head cross-entropy.
template <typename T>
double cross_entropy(const Tensor<T>& probs, const Tensor<T>& targets);

// ---- model ----------------------------------------------------------------

struct ModelConfig {
    std::size_t input_len = 5000;
    std::size_t kernel = 9;
    std::size_t conv1_filters = 16;
    std::size_t conv2_filters = 32;
    std::size_t dense_units = 1024;
    std::size_t classes = 6;  // per head
    double dropout_rate = 0.4;

    void validate() const;
    std::size_t flat_features() const { return input_len / 4 * conv2_filters; }
    std::size_t logits() const { return 3 * classes; }

    bool operator==(const ModelConfig&) const = default;
};

inline constexpr std::size_t kParameterBlocks = 8;

/// Block names in declaration (and checkpoint) order.
const std::array<std::string, kParameterBlocks>& parameter_block_names();

/// Weights and biases of every layer, in declaration order:
/// conv1 kernel, conv1 bias, conv2 kernel, conv2 bias, dense weight,
/// dense bias, head weight, head bias.
template <typename T>
struct Parameters {
    std::array<Tensor<T>, kParameterBlocks> blocks;

    static Parameters zeros(const ModelConfig& config);

    Tensor<T>& conv1_kernel() { return blocks[0]; }
    Tensor<T>& conv1_bias() { return blocks[1]; }
    Tensor<T>& conv2_kernel() { return blocks[2]; }
    Tensor<T>& conv2_bias() { return blocks[3]; }
    Tensor<T>& dense_weight() { return blocks[4]; }
    Tensor<T>& dense_bias() { return blocks[5]; }
    Tensor<T>& head_weight() { return blocks[6]; }
    Tensor<T>& head_bias() { return blocks[7]; }
    const Tensor<T>& conv1_kernel() const { return blocks[0]; }
    const Tensor<T>& conv1_bias() const { return blocks[1]; }
    const Tensor<T>& conv2_kernel() const { return blocks[2]; }
    const Tensor<T>& conv2_bias() const { return blocks[3]; }
    const Tensor<T>& dense_weight() const { return blocks[4]; }
    const Tensor<T>& dense_bias() const { return blocks[5]; }
    const Tensor<T>& head_weight() const { return blocks[6]; }
    const Tensor<T>& head_bias() const { return blocks[7]; }

    std::size_t count() const;
    void fill(T value);
    bool congruent(const Parameters& other) const;

    bool operator==(const Parameters&) const = default;
};

/// Activations kept from the last training forward pass.
template <typename T>
struct ForwardCache {
    std::size_t batch = 0;
    Tensor<T> input;
    Tensor<T> conv1_out;  // after relu
    std::vector<std::uint8_t> pool1_argmax;
    Tensor<T> pool1_out;
    Tensor<T> conv2_out;  // after relu
    std::vector<std::uint8_t> pool2_argmax;
    Tensor<T> pool2_out;  // viewed as [M x F]
    Tensor<T> dense_out;  // after relu
    std::vector<T> dropout_scale;
    Tensor<T> dropped;
    Tensor<T> probs;
    Tensor<T> targets;
};

template <typename T>
class Network {
public:
    explicit Network(const ModelConfig& config);

    /// He-scaled Gaussian weights for the ReLU layers, a 1/10 fan-in scale
    /// for the output head, zero biases.
    void initialize(std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    Parameters<T>& params() { return params_; }
    const Parameters<T>& params() const { return params_; }

    /// Inference probabilities [M x 3 x K] (dropout off). Traces are pushed
    /// through fixed-size zero-padded chunks so each trace's output does not
    /// depend on what it is batched with.
    Tensor<T> predict(std::span<const T> inputs, std::size_t batch) const;

    /// Training forward pass. The dropout mask is a pure function of
    /// `dropout_seed`. Returns the loss and keeps activations for backward().
    double forward_train(std::span<const T> inputs, std::span<const T> targets, std::size_t batch,
                         std::uint64_t dropout_seed);

    /// Loss of the cached forward pass.
    double last_loss() const { return last_loss_; }
    const Tensor<T>& last_probs() const;

    /// Exact reverse-mode gradients of the cached loss; `grads` is overwritten.
    void backward(Parameters<T>& grads) const;

    static constexpr std::size_t kInferenceChunk = 32;

private:
    Tensor<T> forward_core(const Tensor<T>& input, bool training, std::uint64_t dropout_seed,
                           ForwardCache<T>* cache) const;

    ModelConfig config_;
    Parameters<T> params_;
    std::optional<ForwardCache<T>> cache_;
    double last_loss_ = 0.0;
};

// ---- optimizer --------------------------------------------------------------

struct AdamConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    bool operator==(const AdamConfig&) const = default;
};

template <typename T>
struct AdamState {
    AdamConfig hyper;
    std::uint64_t step = 0;
    Parameters<T> first_moment;
    Parameters<T> second_moment;

    static AdamState fresh(const ModelConfig& config, const AdamConfig& hyper);

    bool operator==(const AdamState&) const = default;
};

/// Bias-corrected adaptive-moment update on raw arrays.
template <typename T>
void adam_update(std::span<T> params, std::span<const T> grads, std::span<T> m, std::span<T> v,
                 const AdamConfig& hyper, std::uint64_t step);

/// One update of every block; increments state.step.
template <typename T>
void adam_step(AdamState<T>& state, Parameters<T>& params, const Parameters<T>& grads);

// ---- gradient check ---------------------------------------------------------

struct GradCheckReport {
    double max_relative_error = 0.0;
    std::size_t worst_block = 0;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
};

/// Relative error used by the gradient check: |a-b| / max(|a|, |b|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-6);

/// Compares `analytic` against central differences of the loss over every
/// parameter of `net` (dropout mask fixed by `dropout_seed`).
GradCheckReport compare_with_finite_differences(Network<double>& net, std::span<const double> inputs,
                                                std::span<const double> targets, std::size_t batch,
                                                std::uint64_t dropout_seed, const Parameters<double>& analytic,
                                                double eps);

/// backward() vs central differences on a freshly initialised model.
GradCheckReport grad_check(const ModelConfig& config, std::span<const double> inputs,
                           std::span<const double> targets, std::size_t batch, std::uint64_t seed,
                           double eps = 1e-5);

}  // namespace qpcnet::nn
