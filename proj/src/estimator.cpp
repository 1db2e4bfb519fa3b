#include "qpcnet/estimator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "qpcnet/error.hpp"

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

namespace qpcnet::estimator {

namespace {

// Adam moments of parameters whose gradient has gone to zero decay through the
// float denormal range, where x86 arithmetic is ~100x slower. Flush them to
// zero while training; restores the caller's mode on exit.
class FlushDenormals {
public:
#if defined(__SSE__)
    FlushDenormals() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040); }  // FTZ | DAZ
    ~FlushDenormals() { _mm_setcsr(saved_); }

private:
    unsigned saved_;
#endif
};

void check_probs(const nn::Tensor<float>& probs, std::size_t traces) {
    if (probs.shape.size() != 3 || probs.dim(1) != 3 || probs.dim(0) != traces) {
        throw ShapeError("probabilities must be [M x 3 x K] with M = " + std::to_string(traces));
    }
}

}  // namespace

void TrainConfig::validate() const {
    if (steps_per_batch == 0) throw ConfigError("training.steps_per_batch", "must be positive");
    if (total_steps == 0) throw ConfigError("training.total_steps", "must be positive");
    if (eval_every == 0) throw ConfigError("training.eval_every", "must be positive");
    if (!(adam.learning_rate > 0.0)) throw ConfigError("training.learning_rate", "must be positive");
}

std::size_t TrainConfig::batches_needed() const {
    return (total_steps + steps_per_batch - 1) / steps_per_batch;
}

void MetricsLog::append(const MetricRecord& record) {
    if (!records.empty() && record.step <= records.back().step) {
        throw Error("metrics steps must be strictly increasing");
    }
    records.push_back(record);
}

std::string MetricsLog::to_csv() const {
    std::ostringstream out;
    out << kMetricsHeader << '\n';
    out.precision(17);
    for (const auto& r : records) {
        out << r.step << ',' << r.loss << ',' << r.fidelity << ',' << r.avg_distance << '\n';
    }
    return out.str();
}

MetricsLog MetricsLog::from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != kMetricsHeader) {
        throw FormatError(FormatError::Kind::BadMagic, "metrics CSV must start with '" + std::string(kMetricsHeader) + "'");
    }
    MetricsLog log;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        MetricRecord r;
        char c1 = 0, c2 = 0, c3 = 0;
        if (!(row >> r.step >> c1 >> r.loss >> c2 >> r.fidelity >> c3 >> r.avg_distance) || c1 != ',' || c2 != ',' ||
            c3 != ',') {
            throw FormatError(FormatError::Kind::SizeMismatch, "malformed metrics row: " + line);
        }
        log.append(r);
    }
    return log;
}

void MetricsLog::write_csv(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    out << to_csv();
    if (!out) throw FormatError(FormatError::Kind::Io, "cannot write " + path.string());
}

MetricsLog MetricsLog::read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError(FormatError::Kind::Io, "cannot open " + path.string());
    std::stringstream buffer;
    buffer << in.rdbuf();
    return from_csv(buffer.str());
}

std::vector<LabelIndices> argmax_indices(const nn::Tensor<float>& probs) {
    check_probs(probs, probs.shape.empty() ? 0 : probs.dim(0));
    const std::size_t m = probs.dim(0), k = probs.dim(2);
    std::vector<LabelIndices> out(m);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < 3; ++p) {
            const float* row = probs.data.data() + (i * 3 + p) * k;
            // max_element returns the first maximum, i.e. the lowest index on ties.
            out[i][p] = static_cast<std::uint8_t>(std::max_element(row, row + k) - row);
        }
    }
    return out;
}

double fidelity(const nn::Tensor<float>& probs, std::span<const LabelIndices> truth) {
    check_probs(probs, truth.size());
    if (truth.empty()) throw ShapeError("fidelity of an empty batch");
    const auto guess = argmax_indices(probs);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        for (std::size_t p = 0; p < 3; ++p) hits += guess[i][p] == truth[i][p] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(3 * truth.size());
}

double avg_distance(const nn::Tensor<float>& probs, std::span<const LabelIndices> truth, const ParamGrid& grid) {
    check_probs(probs, truth.size());
    if (truth.empty()) throw ShapeError("distance of an empty batch");
    const std::size_t k = probs.dim(2);
    for (std::size_t p = 0; p < 3; ++p) {
        if (grid.values(p).size() != k) throw ShapeError("grid size does not match the probability width");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        for (std::size_t p = 0; p < 3; ++p) {
            const auto& values = grid.values(p);
            const float* row = probs.data.data() + (i * 3 + p) * k;
            double expected = 0.0;
            for (std::size_t j = 0; j < k; ++j) expected += static_cast<double>(row[j]) * values[j];
            total += std::abs(expected - values[truth[i][p]]);
        }
    }
    return total / static_cast<double>(3 * truth.size());
}

void check_compatible(const nn::ModelConfig& model, const LabeledBatch& batch) {
    if (batch.trace_len != model.input_len) {
        throw ShapeError("batch traces have " + std::to_string(batch.trace_len) + " samples but the model expects " +
                         std::to_string(model.input_len));
    }
    for (std::size_t s : batch.grid.sizes()) {
        if (s != model.classes) {
            throw ShapeError("batch grid has " + std::to_string(s) + " values per parameter but the model has " +
                             std::to_string(model.classes) + " classes per head");
        }
    }
}

Evaluation evaluate(const nn::Network<float>& net, const LabeledBatch& batch) {
    check_compatible(net.config(), batch);
    const nn::Tensor<float> probs = net.predict(batch.samples, batch.size());
    nn::Tensor<float> targets(probs.shape);
    targets.data = batch.targets();
    return {nn::cross_entropy(probs, targets), fidelity(probs, batch.labels),
            avg_distance(probs, batch.labels, batch.grid)};
}

TrainResult train_on(const TrainConfig& config, const nn::ModelConfig& model, const BatchSource& source,
                     const LabeledBatch& eval_batch, std::optional<nn::Checkpoint> resume, const EvalCallback& on_eval) {
    config.validate();
    model.validate();
    check_compatible(model, eval_batch);
    const FlushDenormals flush;

    nn::Network<float> net(model);
    nn::AdamState<float> adam = nn::AdamState<float>::fresh(model, config.adam);
    if (resume) {
        if (resume->config != model) throw ShapeError("resume checkpoint was trained with a different model config");
        net.params() = std::move(resume->params);
        if (resume->optimizer) {
            adam = std::move(*resume->optimizer);
            adam.hyper = config.adam;
        }
    } else {
        net.initialize(derive_seed(config.seed, 0xC0FFEE));
    }
    const std::size_t start = static_cast<std::size_t>(adam.step);
    if (start > config.total_steps) {
        throw ConfigError("training.total_steps", "checkpoint is already past the requested step count");
    }

    TrainResult result;
    const auto record = [&](std::size_t step) {
        const Evaluation e = evaluate(net, eval_batch);
        const MetricRecord r{step, e.loss, e.fidelity, e.avg_distance};
        result.log.append(r);
        if (on_eval) on_eval(r);
    };
    if (!resume) record(0);

    nn::Parameters<float> grads = nn::Parameters<float>::zeros(model);
    std::size_t loaded = static_cast<std::size_t>(-1);
    const LabeledBatch* batch = nullptr;
    std::vector<float> targets;
    for (std::size_t step = start; step < config.total_steps; ++step) {
        const std::size_t index = step / config.steps_per_batch;
        if (index != loaded) {
            batch = &source(index);
            check_compatible(model, *batch);
            targets = batch->targets();
            loaded = index;
        }
        net.forward_train(batch->samples, targets, batch->size(), derive_seed(config.seed, step + 1));
        net.backward(grads);
        nn::adam_step(adam, net.params(), grads);
        const std::size_t done = step + 1;
        if (done % config.eval_every == 0 || done == config.total_steps) record(done);
    }

    result.checkpoint = {model, std::move(net.params()), std::move(adam)};
    return result;
}

std::vector<std::filesystem::path> list_batch_files(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) {
        throw FormatError(FormatError::Kind::Io, "training directory " + dir.string() + " does not exist");
    }
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".qdb") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end(), [](const auto& a, const auto& b) {
        return a.filename().string() < b.filename().string();
    });
    return files;
}

TrainResult train(const TrainConfig& config, const std::filesystem::path& train_dir, const nn::ModelConfig& model,
                  std::optional<nn::Checkpoint> resume, const EvalCallback& on_eval) {
    config.validate();
    model.validate();
    auto files = list_batch_files(train_dir);
    const auto eval_path = std::filesystem::weakly_canonical(config.eval_batch_path);
    for (const auto& f : files) {
        if (std::filesystem::weakly_canonical(f) == eval_path) {
            throw ConfigError("training.eval_batch", "evaluation batch " + f.string() + " is also a training file");
        }
    }
    const std::size_t needed = config.batches_needed();
    if (files.size() < needed) {
        throw FormatError(FormatError::Kind::SizeMismatch, "schedule needs " + std::to_string(needed) + " batch files but " +
                                                     train_dir.string() + " holds " + std::to_string(files.size()));
    }
    files.resize(needed);

    // Pre-flight: every file the schedule touches must exist and fit the model.
    const dataset::DatasetHeader first = dataset::read_header(files.front());
    for (const auto& f : files) {
        const dataset::DatasetHeader h = dataset::read_header(f);
        if (h.trace_len != model.input_len) {
            throw ShapeError(f.string() + ": traces have " + std::to_string(h.trace_len) +
                             " samples but the model expects " + std::to_string(model.input_len));
        }
        for (std::size_t s : h.grid.sizes()) {
            if (s != model.classes) throw ShapeError(f.string() + ": grid size does not match model classes");
        }
        if (h.grid != first.grid || h.dt != first.dt || h.mode != first.mode) {
            throw ShapeError(f.string() + ": grid, dt or mode differs from " + files.front().string());
        }
    }
    const LabeledBatch eval_batch = dataset::read_batch(config.eval_batch_path);
    if (eval_batch.grid != first.grid) {
        throw ShapeError("evaluation batch uses a different parameter grid than the training data");
    }

    LabeledBatch current;
    const BatchSource source = [&](std::size_t index) -> const LabeledBatch& {
        current = dataset::read_batch(files.at(index));
        return current;
    };
    return train_on(config, model, source, eval_batch, std::move(resume), on_eval);
}

Prediction predict(const nn::Network<float>& net, std::span<const float> trace, const ParamGrid& grid) {
    if (trace.size() != net.config().input_len) {
        throw ShapeError("trace has " + std::to_string(trace.size()) + " samples but the model expects " +
                         std::to_string(net.config().input_len));
    }
    const std::size_t k = net.config().classes;
    for (std::size_t s : grid.sizes()) {
        if (s != k) throw ShapeError("grid size does not match model classes");
    }
    const nn::Tensor<float> probs = net.predict(trace, 1);
    Prediction out;
    for (std::size_t p = 0; p < 3; ++p) {
        out.distributions[p].assign(probs.data.begin() + static_cast<std::ptrdiff_t>(p * k),
                                    probs.data.begin() + static_cast<std::ptrdiff_t>((p + 1) * k));
    }
    out.indices = argmax_indices(probs).front();
    out.params = grid.params_at(out.indices);
    return out;
}

}  // namespace qpcnet::estimator
