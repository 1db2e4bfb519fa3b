#include "qpcnet/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "qpcnet/error.hpp"

namespace qpcnet::config {

namespace {

// Reads typed fields out of one JSON object and remembers which keys were
// consumed so leftovers can be reported.
class Section {
public:
    Section(const Json& root, std::string name) : name_(std::move(name)) {
        if (root.contains(name_)) {
            obj_ = &root.at(name_);
            if (!obj_->is_object()) throw ConfigError(name_, "must be an object");
        }
    }
    Section(const Json* obj, std::string name) : name_(std::move(name)), obj_(obj) {
        if (!obj_->is_object()) throw ConfigError(name_, "must be an object");
    }

    template <typename T>
    void read(const char* key, T& out) {
        if (!obj_ || !obj_->contains(key)) return;
        seen_.insert(key);
        try {
            out = obj_->at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(path(key), "has the wrong type");
        }
    }

    const Json* sub(const char* key) {
        if (!obj_ || !obj_->contains(key)) return nullptr;
        seen_.insert(key);
        return &obj_->at(key);
    }

    std::string path(const std::string& key) const { return name_ + "." + key; }

    void reject_unknown() const {
        if (!obj_) return;
        for (const auto& [key, value] : obj_->items()) {
            if (!seen_.count(key)) throw ConfigError(path(key), "unknown field");
        }
    }

private:
    std::string name_;
    const Json* obj_ = nullptr;
    std::set<std::string> seen_;
};

template <typename F>
void field_check(const std::string& field, F&& f) {
    try {
        f();
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(field, e.what());
    }
}

}  // namespace

std::size_t RunConfig::trace_len() const { return sim::bin_count(physics.duration, physics.dt); }

dataset::BatchSpec RunConfig::batch_spec(std::size_t batch_size) const {
    return {physics.grid, batch_size, physics.duration, physics.dt, physics.mode, physics.noise};
}

void RunConfig::validate() const {
    field_check("physics.grid", [&] { physics.grid.validate(); });
    if (!(physics.dt > 0.0)) throw ConfigError("physics.dt_us", "must be positive");
    if (!(physics.duration > 0.0)) throw ConfigError("physics.duration_us", "must be positive");
    const double ratio = physics.duration / physics.dt;
    if (std::abs(ratio - std::round(ratio)) > 1e-6 * ratio) {
        throw ConfigError("physics.duration_us", "must be a whole number of dt_us bins");
    }
    const std::size_t n = trace_len();
    if (n % 4 != 0) {
        throw ConfigError("physics.duration_us", "gives N = " + std::to_string(n) +
                                                     " bins, which is not divisible by 4 (two pooling halvings)");
    }
    if (!(physics.noise.sigma_bin >= 0.0)) throw ConfigError("physics.noise.sigma_bin", "must be >= 0");
    if (!(physics.noise.filter_tau > 0.0)) throw ConfigError("physics.noise.filter_tau_us", "must be > 0");
    if (!(physics.noise.sigma_extra >= 0.0)) throw ConfigError("physics.noise.sigma_extra", "must be >= 0");

    if (dataset.batch_size == 0) throw ConfigError("dataset.batch_size", "must be >= 1");
    if (dataset.eval_batch_size == 0) throw ConfigError("dataset.eval_batch_size", "must be >= 1");
    if (dataset.workers == 0) throw ConfigError("dataset.workers", "must be >= 1");

    // Non-square grids are fine for the likelihood filter; the classifier
    // rejects them when a batch is loaded.
    const auto sizes = physics.grid.sizes();
    if (model.input_len != n) {
        throw ConfigError("model.input_len", "is " + std::to_string(model.input_len) + " but duration/dt gives " +
                                                 std::to_string(n));
    }
    if (model.classes != sizes[0]) {
        throw ConfigError("model.classes", "does not match the grid size " + std::to_string(sizes[0]));
    }
    field_check("model", [&] { model.validate(); });
    field_check("training", [&] { training.validate(); });

    if (!(bayes.sigma_bin > 0.0)) throw ConfigError("bayes.sigma_bin", "must be > 0");
    if (bayes.substeps == 0) throw ConfigError("bayes.substeps", "must be >= 1");
    if (bayes.workers == 0) throw ConfigError("bayes.workers", "must be >= 1");
}

RunConfig from_json(const Json& json) {
    if (!json.is_object()) throw ConfigError("(root)", "config must be a JSON object");
    for (const auto& [key, value] : json.items()) {
        if (key != "physics" && key != "dataset" && key != "model" && key != "training" && key != "bayes") {
            throw ConfigError(key, "unknown section");
        }
    }
    RunConfig c;

    Section physics(json, "physics");
    physics.read("omega_values", c.physics.grid.omega_values);
    physics.read("gamma_up_values", c.physics.grid.gamma_up_values);
    physics.read("gamma_down_values", c.physics.grid.gamma_down_values);
    physics.read("duration_us", c.physics.duration);
    physics.read("dt_us", c.physics.dt);
    std::string mode = std::string(sim::to_string(c.physics.mode));
    physics.read("mode", mode);
    field_check("physics.mode", [&] { c.physics.mode = sim::mode_from_string(mode); });
    if (const Json* noise = physics.sub("noise")) {
        Section inner(noise, "physics.noise");
        inner.read("sigma_bin", c.physics.noise.sigma_bin);
        inner.read("filter_tau_us", c.physics.noise.filter_tau);
        inner.read("sigma_extra", c.physics.noise.sigma_extra);
        inner.reject_unknown();
    }
    physics.reject_unknown();

    Section data(json, "dataset");
    data.read("batch_size", c.dataset.batch_size);
    data.read("batch_count", c.dataset.batch_count);
    data.read("eval_batch_size", c.dataset.eval_batch_size);
    data.read("seed", c.dataset.seed);
    data.read("workers", c.dataset.workers);
    data.reject_unknown();

    c.model.classes = c.physics.grid.omega_values.size();
    c.model.input_len = 0;
    Section model(json, "model");
    model.read("kernel", c.model.kernel);
    model.read("conv1_filters", c.model.conv1_filters);
    model.read("conv2_filters", c.model.conv2_filters);
    model.read("dense_units", c.model.dense_units);
    model.read("dropout_rate", c.model.dropout_rate);
    std::size_t input_len = 0;
    std::size_t classes = 0;
    model.read("input_len", input_len);
    model.read("classes", classes);
    model.reject_unknown();

    Section training(json, "training");
    training.read("steps_per_batch", c.training.steps_per_batch);
    training.read("total_steps", c.training.total_steps);
    training.read("eval_every", c.training.eval_every);
    training.read("seed", c.training.seed);
    training.read("learning_rate", c.training.adam.learning_rate);
    training.read("beta1", c.training.adam.beta1);
    training.read("beta2", c.training.adam.beta2);
    training.read("epsilon", c.training.adam.epsilon);
    training.reject_unknown();

    c.bayes.sigma_bin = c.physics.noise.sigma_bin;
    Section bayes(json, "bayes");
    bayes.read("sigma_bin", c.bayes.sigma_bin);
    bayes.read("checkpoints_us", c.bayes.checkpoints);
    bayes.read("substeps", c.bayes.substeps);
    bayes.read("workers", c.bayes.workers);
    bayes.reject_unknown();

    // Derived model extents; explicit values must agree.
    if (c.physics.dt > 0.0 && c.physics.duration > 0.0) {
        c.model.input_len = static_cast<std::size_t>(std::llround(c.physics.duration / c.physics.dt));
    }
    if (input_len != 0 && input_len != c.model.input_len) {
        throw ConfigError("model.input_len", "is " + std::to_string(input_len) + " but duration/dt gives " +
                                                 std::to_string(c.model.input_len));
    }
    if (classes != 0 && classes != c.model.classes) {
        throw ConfigError("model.classes", "does not match the grid size " + std::to_string(c.model.classes));
    }
    c.validate();
    return c;
}

Json to_json(const RunConfig& c) {
    Json j;
    j["physics"] = {{"omega_values", c.physics.grid.omega_values},
                    {"gamma_up_values", c.physics.grid.gamma_up_values},
                    {"gamma_down_values", c.physics.grid.gamma_down_values},
                    {"duration_us", c.physics.duration},
                    {"dt_us", c.physics.dt},
                    {"mode", std::string(sim::to_string(c.physics.mode))},
                    {"noise",
                     {{"sigma_bin", c.physics.noise.sigma_bin},
                      {"filter_tau_us", c.physics.noise.filter_tau},
                      {"sigma_extra", c.physics.noise.sigma_extra}}}};
    j["dataset"] = {{"batch_size", c.dataset.batch_size},
                    {"batch_count", c.dataset.batch_count},
                    {"eval_batch_size", c.dataset.eval_batch_size},
                    {"seed", c.dataset.seed},
                    {"workers", c.dataset.workers}};
    j["model"] = {{"input_len", c.model.input_len},         {"classes", c.model.classes},
                  {"kernel", c.model.kernel},               {"conv1_filters", c.model.conv1_filters},
                  {"conv2_filters", c.model.conv2_filters}, {"dense_units", c.model.dense_units},
                  {"dropout_rate", c.model.dropout_rate}};
    j["training"] = {{"steps_per_batch", c.training.steps_per_batch},
                     {"total_steps", c.training.total_steps},
                     {"eval_every", c.training.eval_every},
                     {"seed", c.training.seed},
                     {"learning_rate", c.training.adam.learning_rate},
                     {"beta1", c.training.adam.beta1},
                     {"beta2", c.training.adam.beta2},
                     {"epsilon", c.training.adam.epsilon}};
    j["bayes"] = {{"sigma_bin", c.bayes.sigma_bin},
                  {"checkpoints_us", c.bayes.checkpoints},
                  {"substeps", c.bayes.substeps},
                  {"workers", c.bayes.workers}};
    return j;
}

RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path, "cannot open config file");
    Json j;
    try {
        j = Json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path, std::string("invalid JSON: ") + e.what());
    }
    return from_json(j);
}

void apply_overrides(Json& json, const std::vector<std::string>& overrides) {
    for (const auto& item : overrides) {
        const auto eq = item.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError(item, "override must look like section.field=value");
        const std::string key = item.substr(0, eq);
        const std::string text = item.substr(eq + 1);
        Json value;
        try {
            value = Json::parse(text);
        } catch (const nlohmann::json::parse_error&) {
            value = text;
        }
        std::string pointer = "/" + key;
        for (char& ch : pointer) {
            if (ch == '.') ch = '/';
        }
        json[Json::json_pointer(pointer)] = value;
    }
}

std::uint64_t batch_seed(const DatasetConfig& config, std::size_t index) { return derive_seed(config.seed, index); }

std::uint64_t eval_seed(const DatasetConfig& config) {
    return derive_seed(config.seed ^ 0xE7A1BA7C4E5EED00ULL, 0);
}

}  // namespace qpcnet::config
