#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "qpcnet/bayes.hpp"
#include "qpcnet/checkpoint.hpp"
#include "qpcnet/config.hpp"
#include "qpcnet/dataset.hpp"
#include "qpcnet/error.hpp"
#include "qpcnet/estimator.hpp"
#include "qpcnet/io.hpp"

namespace fs = std::filesystem;
using namespace qpcnet;
using config::Json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitInput = 2;

struct Common {
    std::string config_path;
    std::vector<std::string> overrides;
    unsigned workers = 0;
};

config::RunConfig resolve(const Common& common) {
    Json j = Json::object();
    if (!common.config_path.empty()) {
        std::ifstream in(common.config_path);
        if (!in) throw ConfigError("--config", "cannot open " + common.config_path);
        try {
            j = Json::parse(in);
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError("--config", std::string("invalid JSON: ") + e.what());
        }
    }
    config::apply_overrides(j, common.overrides);
    config::RunConfig cfg = config::from_json(j);
    if (common.workers != 0) {
        cfg.dataset.workers = common.workers;
        cfg.bayes.workers = common.workers;
    }
    return cfg;
}

void write_json(const fs::path& path, const Json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    out << j.dump(2) << '\n';
    if (!out) throw FormatError(FormatError::Kind::Io, "cannot write " + path.string());
}

Json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError(FormatError::Kind::Io, "cannot open " + path.string());
    try {
        return Json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(FormatError::Kind::SizeMismatch, path.string() + ": invalid JSON: " + e.what());
    }
}

Json params_json(const sim::TrajectoryParams& p) {
    return {{"omega", p.omega}, {"gamma_up", p.gamma_up}, {"gamma_down", p.gamma_down}};
}

Json grid_json(const dataset::ParamGrid& g) {
    return {{"omega_values", g.omega_values},
            {"gamma_up_values", g.gamma_up_values},
            {"gamma_down_values", g.gamma_down_values}};
}

Json indices_json(const dataset::LabelIndices& idx) { return Json::array({idx[0], idx[1], idx[2]}); }

std::string batch_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "batch_%04zu.qdb", i);
    return buf;
}

// ---- generate --------------------------------------------------------------

int cmd_generate(const Common& common, const fs::path& out_dir) {
    const config::RunConfig cfg = resolve(common);
    fs::create_directories(out_dir);
    Json files = Json::array();
    const auto emit = [&](const fs::path& path, std::size_t size, std::uint64_t seed, const std::string& role) {
        const dataset::LabeledBatch batch = dataset::generate_batch(cfg.batch_spec(size), seed, cfg.dataset.workers);
        dataset::write_batch(batch, path);
        files.push_back({{"path", fs::relative(path, out_dir).generic_string()},
                         {"role", role},
                         {"traces", size},
                         {"seed", seed},
                         {"sha256", io::sha256_file(path)}});
        std::cerr << "wrote " << path.string() << '\n';
    };
    for (std::size_t i = 0; i < cfg.dataset.batch_count; ++i) {
        emit(out_dir / batch_name(i), cfg.dataset.batch_size, config::batch_seed(cfg.dataset, i), "train");
    }
    // Kept in a subdirectory so it can never be picked up as training data.
    emit(out_dir / "eval" / "eval.qdb", cfg.dataset.eval_batch_size, config::eval_seed(cfg.dataset), "eval");
    Json manifest{{"format", "QDB1"}, {"config", config::to_json(cfg)}, {"files", files}};
    // workers never changes the data, so keep it out of the echo to keep manifests comparable.
    manifest["config"]["dataset"].erase("workers");
    manifest["config"]["bayes"].erase("workers");
    write_json(out_dir / "manifest.json", manifest);
    return kExitOk;
}

// ---- train -----------------------------------------------------------------

int cmd_train(const Common& common, const fs::path& data_dir, fs::path eval_path, const fs::path& model_path,
              const fs::path& metrics_path, fs::path summary_path, bool resume) {
    config::RunConfig cfg = resolve(common);
    if (eval_path.empty()) eval_path = data_dir / "eval" / "eval.qdb";
    if (summary_path.empty()) summary_path = fs::path(metrics_path).replace_extension(".summary.json");
    cfg.training.eval_batch_path = eval_path;

    std::optional<nn::Checkpoint> start;
    estimator::MetricsLog previous;
    if (resume && fs::exists(model_path)) {
        start = nn::load_checkpoint(model_path);
        if (start->config != cfg.model) {
            throw ShapeError("checkpoint " + model_path.string() + " does not match the configured model");
        }
        if (fs::exists(metrics_path)) previous = estimator::MetricsLog::read_csv(metrics_path);
        std::cerr << "resuming from step " << (start->optimizer ? start->optimizer->step : 0) << '\n';
    }

    const auto t0 = std::chrono::steady_clock::now();
    estimator::MetricsLog log = previous;
    const auto on_eval = [&](const estimator::MetricRecord& r) {
        log.append(r);
        log.write_csv(metrics_path);
        std::cerr << "step " << r.step << " loss " << r.loss << " fidelity " << r.fidelity << " avg_distance "
                  << r.avg_distance << '\n';
    };
    const estimator::TrainResult result = estimator::train(cfg.training, data_dir, cfg.model, std::move(start), on_eval);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    nn::save_checkpoint(result.checkpoint, model_path);
    log.write_csv(metrics_path);
    const estimator::MetricRecord& last = log.records.back();
    Json summary{{"config", config::to_json(cfg)},
                 {"data_dir", data_dir.generic_string()},
                 {"eval_batch", eval_path.generic_string()},
                 {"checkpoint", model_path.generic_string()},
                 {"metrics_csv", metrics_path.generic_string()},
                 {"mode", std::string(sim::to_string(cfg.physics.mode))},
                 {"duration_us", cfg.physics.duration},
                 {"final",
                  {{"step", last.step},
                   {"loss", last.loss},
                   {"fidelity", last.fidelity},
                   {"avg_distance_mhz", last.avg_distance}}},
                 {"wall_time_s", wall}};
    write_json(summary_path, summary);
    return kExitOk;
}

// ---- evaluate / predict ----------------------------------------------------

nn::Network<float> load_network(const fs::path& model_path) {
    nn::Checkpoint ck = nn::load_checkpoint(model_path);
    nn::Network<float> net(ck.config);
    net.params() = std::move(ck.params);
    return net;
}

Json model_json(const nn::ModelConfig& m) {
    return {{"input_len", m.input_len},         {"classes", m.classes},
            {"kernel", m.kernel},               {"conv1_filters", m.conv1_filters},
            {"conv2_filters", m.conv2_filters}, {"dense_units", m.dense_units},
            {"dropout_rate", m.dropout_rate}};
}

int cmd_evaluate(const fs::path& model_path, const fs::path& batch_path) {
    const nn::Network<float> net = load_network(model_path);
    const dataset::LabeledBatch batch = dataset::read_batch(batch_path);
    const estimator::Evaluation e = estimator::evaluate(net, batch);
    Json out{{"model", model_path.generic_string()},
             {"model_config", model_json(net.config())},
             {"batch", batch_path.generic_string()},
             {"traces", batch.size()},
             {"mode", std::string(sim::to_string(batch.mode))},
             {"loss", e.loss},
             {"fidelity", e.fidelity},
             {"avg_distance_mhz", e.avg_distance}};
    std::cout << out.dump(2) << '\n';
    return kExitOk;
}

struct LoadedTrace {
    sim::CurrentTrace trace;
    std::optional<dataset::ParamGrid> grid;
    std::optional<dataset::LabelIndices> truth;
};

// A trace file is either a QDB1 batch (pick one row with --index) or plain
// text with one sample per line; text traces take dt and mode from the config.
LoadedTrace load_trace(const fs::path& path, std::size_t index, const config::RunConfig& cfg) {
    LoadedTrace out;
    if (path.extension() == ".qdb") {
        const dataset::LabeledBatch batch = dataset::read_batch(path);
        if (index >= batch.size()) {
            throw InvalidParameter("--index " + std::to_string(index) + " is out of range for " +
                                   std::to_string(batch.size()) + " traces");
        }
        out.trace = batch.current_trace(index);
        out.grid = batch.grid;
        out.truth = batch.labels[index];
        return out;
    }
    std::ifstream in(path);
    if (!in) throw FormatError(FormatError::Kind::Io, "cannot open " + path.string());
    out.trace.dt = cfg.physics.dt;
    out.trace.mode = cfg.physics.mode;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        try {
            std::size_t used = 0;
            out.trace.samples.push_back(std::stof(line, &used));
        } catch (const std::exception&) {
            throw FormatError(FormatError::Kind::SizeMismatch,
                              path.string() + ":" + std::to_string(lineno) + ": not a number");
        }
    }
    return out;
}

int cmd_predict(const Common& common, const fs::path& model_path, const fs::path& trace_path, std::size_t index) {
    const config::RunConfig cfg = resolve(common);
    const nn::Network<float> net = load_network(model_path);
    const LoadedTrace t = load_trace(trace_path, index, cfg);
    const dataset::ParamGrid grid = t.grid.value_or(cfg.physics.grid);
    const estimator::Prediction p = estimator::predict(net, t.trace.samples, grid);
    Json out{{"model", model_path.generic_string()},
             {"trace", trace_path.generic_string()},
             {"index", index},
             {"grid", grid_json(grid)},
             {"distributions",
              {{"omega", p.distributions[0]}, {"gamma_up", p.distributions[1]}, {"gamma_down", p.distributions[2]}}},
             {"map_indices", indices_json(p.indices)},
             {"map_params", params_json(p.params)}};
    if (t.truth) out["truth_indices"] = indices_json(*t.truth);
    std::cout << out.dump(2) << '\n';
    return kExitOk;
}

// ---- bayes -----------------------------------------------------------------

int cmd_bayes(const Common& common, const fs::path& trace_path, std::size_t index, const fs::path& out_path,
              const fs::path& csv_path) {
    const config::RunConfig cfg = resolve(common);
    const LoadedTrace t = load_trace(trace_path, index, cfg);
    const dataset::ParamGrid& grid = cfg.physics.grid;
    const bayes::PosteriorSeries series = bayes::run_filter(t.trace, grid, cfg.bayes);

    Json snaps = Json::array();
    const auto sizes = grid.sizes();
    for (const auto& snap : series.snapshots) {
        const bayes::Marginals m = bayes::marginals(snap.values, sizes);
        const bayes::MapEstimate map = bayes::map_estimate(snap.values, grid);
        double norm = 0.0;
        for (double v : snap.values) norm += v;
        snaps.push_back({{"time_us", snap.time},
                         {"posterior", snap.values},
                         {"log_likelihood", snap.log_likelihood},
                         {"normalization", norm},
                         {"marginals",
                          {{"omega", m.single[0]},
                           {"gamma_up", m.single[1]},
                           {"gamma_down", m.single[2]},
                           {"omega_gamma_up", m.pairs[0]},
                           {"omega_gamma_down", m.pairs[1]},
                           {"gamma_up_gamma_down", m.pairs[2]}}},
                         {"map",
                          {{"indices", indices_json(map.indices)},
                           {"params", params_json(map.params)},
                           {"probability", map.probability}}}});
    }
    Json out{{"config", config::to_json(cfg)},
             {"trace", {{"path", trace_path.generic_string()}, {"index", index}, {"bins", t.trace.samples.size()},
                        {"dt_us", t.trace.dt}, {"mode", std::string(sim::to_string(t.trace.mode))}}},
             {"grid", grid_json(grid)},
             {"index_order", "(i_omega * S_gamma_up + i_gamma_up) * S_gamma_down + i_gamma_down"},
             {"checkpoints", snaps}};
    out["config"]["bayes"].erase("workers");
    out["config"]["dataset"].erase("workers");
    if (t.truth && t.grid && *t.grid == grid) {
        out["truth"] = {{"indices", indices_json(*t.truth)}, {"params", params_json(grid.params_at(*t.truth))}};
    }
    write_json(out_path, out);

    if (!csv_path.empty()) {
        if (csv_path.has_parent_path()) fs::create_directories(csv_path.parent_path());
        std::ofstream csv(csv_path, std::ios::trunc);
        csv.precision(17);
        csv << "time_us,candidate_index,probability\n";
        for (const auto& snap : series.snapshots) {
            for (std::size_t c = 0; c < snap.values.size(); ++c) csv << snap.time << ',' << c << ',' << snap.values[c] << '\n';
        }
        if (!csv) throw FormatError(FormatError::Kind::Io, "cannot write " + csv_path.string());
    }
    return kExitOk;
}

// ---- report ----------------------------------------------------------------

std::string format_number(double v) {
    std::ostringstream s;
    s.precision(6);
    s << v;
    return s.str();
}

std::string format_duration(double t) {
    std::ostringstream s;
    s << t;
    return s.str();
}

int cmd_report(const std::vector<fs::path>& metrics_files, const std::vector<fs::path>& bayes_files,
               const fs::path& out_dir) {
    fs::create_directories(out_dir / "curves");
    // (mode, T) -> final average distance
    std::map<std::pair<std::string, double>, double> cells;
    std::vector<double> durations{500.0, 200.0, 50.0};
    Json runs = Json::array();
    for (const auto& csv : metrics_files) {
        const fs::path summary_path = fs::path(csv).replace_extension(".summary.json");
        if (!fs::exists(csv) || !fs::exists(summary_path)) {
            std::cerr << "warning: skipping " << csv.string() << " (metrics or summary missing)\n";
            runs.push_back({{"metrics_csv", csv.generic_string()}, {"status", "missing"}});
            continue;
        }
        const estimator::MetricsLog log = estimator::MetricsLog::read_csv(csv);
        const Json summary = read_json(summary_path);
        const std::string mode = summary.at("mode").get<std::string>();
        const double duration = summary.at("duration_us").get<double>();
        if (log.records.empty()) throw FormatError(FormatError::Kind::SizeMismatch, csv.string() + " has no rows");
        const estimator::MetricRecord& last = log.records.back();
        cells[{mode, duration}] = last.avg_distance;
        if (std::find(durations.begin(), durations.end(), duration) == durations.end()) durations.push_back(duration);

        const std::string curve = "curve_" + mode + "_T" + format_duration(duration) + "us_" + csv.stem().string() + ".csv";
        log.write_csv(out_dir / "curves" / curve);
        runs.push_back({{"metrics_csv", csv.generic_string()},
                        {"status", "ok"},
                        {"mode", mode},
                        {"duration_us", duration},
                        {"final_step", last.step},
                        {"final_fidelity", last.fidelity},
                        {"final_avg_distance_mhz", last.avg_distance},
                        {"curve", ("curves/" + curve)}});
    }

    std::ofstream table(out_dir / "table.csv", std::ios::trunc);
    table << "mode";
    for (double t : durations) table << ",T=" << format_duration(t) << "us";
    table << '\n';
    for (const std::string mode : {"markovian", "nonmarkovian"}) {
        table << mode;
        for (double t : durations) {
            const auto it = cells.find({mode, t});
            table << ',' << (it == cells.end() ? std::string("n/a") : format_number(it->second));
        }
        table << '\n';
    }
    if (!table) throw FormatError(FormatError::Kind::Io, "cannot write table.csv");

    Json posteriors = Json::array();
    for (const auto& path : bayes_files) {
        if (!fs::exists(path)) {
            posteriors.push_back({{"path", path.generic_string()}, {"status", "missing"}});
            continue;
        }
        const Json b = read_json(path);
        Json entry{{"path", path.generic_string()}, {"status", "ok"}};
        Json times = Json::array();
        for (const auto& c : b.at("checkpoints")) {
            times.push_back({{"time_us", c.at("time_us")},
                             {"map_params", c.at("map").at("params")},
                             {"map_probability", c.at("map").at("probability")}});
        }
        entry["checkpoints"] = times;
        if (b.contains("truth")) entry["truth"] = b.at("truth").at("params");
        posteriors.push_back(entry);
    }
    write_json(out_dir / "report.json", Json{{"table", "table.csv"}, {"runs", runs}, {"posteriors", posteriors}});
    return kExitOk;
}

int exit_code_for(const FormatError& e) { return e.kind() == FormatError::Kind::Io ? kExitRuntime : kExitInput; }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Parameter estimation from simulated quantum point contact currents"};
    app.require_subcommand(1);
    Common common;
    const auto add_common = [&](CLI::App* sub, bool with_config) {
        if (with_config) {
            sub->add_option("-c,--config", common.config_path, "JSON run configuration");
            sub->add_option("--set", common.overrides, "Override a config field, e.g. training.total_steps=500")
                ->take_all();
        }
        sub->add_option("-w,--workers", common.workers, "Worker threads (results do not depend on it)");
    };

    fs::path out_dir, data_dir, eval_path, model_path, metrics_path, summary_path, batch_path, trace_path, out_path,
        csv_path;
    std::size_t index = 0;
    bool resume = false;
    std::vector<fs::path> metrics_files, bayes_files;

    auto* gen = app.add_subcommand("generate", "Write training batches, an evaluation batch and a manifest");
    add_common(gen, true);
    gen->add_option("-o,--out", out_dir, "Output directory")->required();

    auto* train = app.add_subcommand("train", "Train the classifier on generated batches");
    add_common(train, true);
    train->add_option("-d,--data", data_dir, "Directory written by generate")->required();
    train->add_option("--eval", eval_path, "Evaluation batch (default DATA/eval/eval.qdb)");
    train->add_option("-m,--model", model_path, "Checkpoint to write")->required();
    train->add_option("--metrics", metrics_path, "Metrics CSV to write")->required();
    train->add_option("--summary", summary_path, "Summary JSON (default METRICS with .summary.json)");
    train->add_flag("--resume", resume, "Continue from the checkpoint at --model");

    auto* eval = app.add_subcommand("evaluate", "Score a checkpoint on a batch");
    eval->add_option("-m,--model", model_path, "Checkpoint")->required();
    eval->add_option("-b,--batch", batch_path, "QDB1 batch")->required();

    auto* pred = app.add_subcommand("predict", "Predict the parameters of a single trace");
    add_common(pred, true);
    pred->add_option("-m,--model", model_path, "Checkpoint")->required();
    pred->add_option("-t,--trace", trace_path, "QDB1 batch or text file with one sample per line")->required();
    pred->add_option("-i,--index", index, "Row of a QDB1 batch");

    auto* bay = app.add_subcommand("bayes", "Grid posterior of a Markovian trace");
    add_common(bay, true);
    bay->add_option("-t,--trace", trace_path, "QDB1 batch or text file with one sample per line")->required();
    bay->add_option("-i,--index", index, "Row of a QDB1 batch");
    bay->add_option("-o,--out", out_path, "Posterior JSON to write")->required();
    bay->add_option("--csv", csv_path, "Also write time,candidate_index,probability rows");

    auto* rep = app.add_subcommand("report", "Summarise finished runs");
    rep->add_option("--metrics", metrics_files, "Metrics CSVs written by train")->take_all();
    rep->add_option("--bayes", bayes_files, "Posterior JSONs written by bayes")->take_all();
    rep->add_option("-o,--out", out_dir, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitInput;
    }

    try {
        if (*gen) return cmd_generate(common, out_dir);
        if (*train) return cmd_train(common, data_dir, eval_path, model_path, metrics_path, summary_path, resume);
        if (*eval) return cmd_evaluate(model_path, batch_path);
        if (*pred) return cmd_predict(common, model_path, trace_path, index);
        if (*bay) return cmd_bayes(common, trace_path, index, out_path, csv_path);
        if (*rep) return cmd_report(metrics_files, bayes_files, out_dir);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitInput;
    } catch (const UnsupportedMode& e) {
        std::cerr << "unsupported mode: " << e.what() << '\n';
        return kExitInput;
    } catch (const ShapeError& e) {
        std::cerr << "shape mismatch: " << e.what() << '\n';
        return kExitInput;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_code_for(e);
    } catch (const InvalidParameter& e) {
        std::cerr << "invalid input: " << e.what() << '\n';
        return kExitInput;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitRuntime;
}
