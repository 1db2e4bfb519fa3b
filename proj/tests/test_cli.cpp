#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <json.hpp>

namespace fs = std::filesystem;
using Json = nlohmann::json;

namespace {

const fs::path& work_dir() {
    static const fs::path dir = [] {
        const fs::path d = fs::temp_directory_path() / "qpcnet_cli_test";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

struct Result {
    int code;
    std::string err;
    std::string out;
};

Result run(const std::string& args) {
    const fs::path out = work_dir() / "stdout.txt";
    const fs::path err = work_dir() / "stderr.txt";
    const std::string cmd = "cd '" + work_dir().string() + "' && '" + QPCNET_CLI + "' " + args + " > '" +
                            out.string() + "' 2> '" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    const auto slurp = [](const fs::path& p) {
        std::ifstream in(p);
        std::stringstream s;
        s << in.rdbuf();
        return s.str();
    };
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(err), slurp(out)};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

void write(const fs::path& p, const std::string& text) {
    std::ofstream out(p);
    out << text;
}

const char* kTiny = R"({
  "physics": {"omega_values": [4, 7, 10], "gamma_up_values": [1, 3.5, 6], "gamma_down_values": [1, 3.5, 6],
              "duration_us": 2},
  "dataset": {"batch_size": 12, "batch_count": 2, "eval_batch_size": 8, "seed": 3},
  "model": {"conv1_filters": 4, "conv2_filters": 4, "dense_units": 8},
  "training": {"steps_per_batch": 2, "total_steps": 4, "eval_every": 2, "seed": 1, "learning_rate": 0.001}
})";

class Cli : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        write(work_dir() / "tiny.json", kTiny);
        ASSERT_EQ(run("generate -c tiny.json -o data").code, 0);
    }
};

}  // namespace

TEST_F(Cli, GenerateWritesManifest) {
    const Json m = Json::parse(slurp(work_dir() / "data" / "manifest.json"));
    ASSERT_EQ(m["files"].size(), 3u);
    EXPECT_EQ(m["files"][0]["path"], "batch_0000.qdb");
    EXPECT_EQ(m["files"][2]["path"], "eval/eval.qdb");
    EXPECT_EQ(m["files"][0]["sha256"].get<std::string>().size(), 64u);
    EXPECT_EQ(m["config"]["physics"]["duration_us"], 2.0);
}

TEST_F(Cli, GenerateIsReproducibleAcrossWorkers) {
    ASSERT_EQ(run("generate -c tiny.json -o again --workers 3").code, 0);
    EXPECT_EQ(slurp(work_dir() / "again" / "manifest.json"), slurp(work_dir() / "data" / "manifest.json"));
}

TEST_F(Cli, InvalidConfigNamesField) {
    const Result r = run("generate -c tiny.json --set physics.duration_us=2.01 -o bad");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("physics.duration_us"), std::string::npos) << r.err;
    EXPECT_EQ(run("generate -c missing.json -o bad").code, 2);
    EXPECT_EQ(run("frobnicate").code, 2);
}

TEST_F(Cli, TrainResumeEvaluatePredict) {
    ASSERT_EQ(run("train -c tiny.json -d data -m run/model.qdm --metrics run/metrics.csv").code, 0);
    const std::string csv = slurp(work_dir() / "run" / "metrics.csv");
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,loss,fidelity,avg_distance_mhz");
    const Json summary = Json::parse(slurp(work_dir() / "run" / "metrics.summary.json"));
    EXPECT_EQ(summary["final"]["step"], 4);
    EXPECT_TRUE(summary.contains("config"));
    EXPECT_TRUE(summary.contains("wall_time_s"));

    // Resume to a longer schedule needs more data than exists: input error.
    EXPECT_EQ(run("train -c tiny.json --set training.total_steps=6 -d data -m run/model.qdm --metrics run/metrics.csv "
                  "--resume")
                  .code,
              2);
    ASSERT_EQ(run("generate -c tiny.json --set dataset.batch_count=3 -o data3").code, 0);
    ASSERT_EQ(run("train -c tiny.json --set training.total_steps=6 -d data3 -m run/model.qdm --metrics run/metrics.csv "
                  "--resume")
                  .code,
              0);
    std::istringstream rows(slurp(work_dir() / "run" / "metrics.csv"));
    std::string line;
    std::getline(rows, line);
    std::vector<int> steps;
    while (std::getline(rows, line)) steps.push_back(std::stoi(line.substr(0, line.find(','))));
    EXPECT_EQ(steps, (std::vector<int>{0, 2, 4, 6}));

    const Result ev = run("evaluate -m run/model.qdm -b data/eval/eval.qdb");
    ASSERT_EQ(ev.code, 0) << ev.err;
    const Json e = Json::parse(ev.out);
    for (const char* key : {"loss", "fidelity", "avg_distance_mhz"}) EXPECT_TRUE(e.contains(key)) << key;

    const Result pr = run("predict -c tiny.json -m run/model.qdm -t data/eval/eval.qdb -i 2");
    ASSERT_EQ(pr.code, 0) << pr.err;
    const Json p = Json::parse(pr.out);
    EXPECT_EQ(p["distributions"]["omega"].size(), 3u);
    EXPECT_TRUE(p["map_params"].contains("gamma_down"));

    // Data of a different trace length.
    ASSERT_EQ(run("generate -c tiny.json --set physics.duration_us=4 -o long").code, 0);
    const Result mismatch = run("evaluate -m run/model.qdm -b long/eval/eval.qdb");
    EXPECT_EQ(mismatch.code, 2);
    EXPECT_EQ(run("train -c tiny.json -d long -m run/other.qdm --metrics run/other.csv").code, 2);
}

TEST_F(Cli, TrainIsDeterministic) {
    ASSERT_EQ(run("train -c tiny.json -d data -m a/model.qdm --metrics a/metrics.csv").code, 0);
    ASSERT_EQ(run("train -c tiny.json -d data -m b/model.qdm --metrics b/metrics.csv").code, 0);
    EXPECT_EQ(slurp(work_dir() / "a" / "metrics.csv"), slurp(work_dir() / "b" / "metrics.csv"));
    EXPECT_EQ(slurp(work_dir() / "a" / "model.qdm"), slurp(work_dir() / "b" / "model.qdm"));
}

TEST_F(Cli, BayesOutputs) {
    ASSERT_EQ(run("generate --set physics.duration_us=500 dataset.batch_count=0 dataset.eval_batch_size=1 -o long_trace")
                  .code,
              0);
    const Result r = run("bayes -t long_trace/eval/eval.qdb -o post.json --csv post.csv --workers 2");
    ASSERT_EQ(r.code, 0) << r.err;
    const Json post = Json::parse(slurp(work_dir() / "post.json"));
    ASSERT_EQ(post["checkpoints"].size(), 4u);
    for (const auto& c : post["checkpoints"]) {
        EXPECT_EQ(c["posterior"].size(), 216u);
        EXPECT_NEAR(c["normalization"].get<double>(), 1.0, 1e-9);
        EXPECT_EQ(c["marginals"]["omega"].size(), 6u);
        EXPECT_EQ(c["marginals"]["omega_gamma_up"].size(), 36u);
    }
    EXPECT_TRUE(post.contains("truth"));
    std::istringstream csv(slurp(work_dir() / "post.csv"));
    std::string header;
    std::getline(csv, header);
    EXPECT_EQ(header, "time_us,candidate_index,probability");

    const Result one = run("bayes -t long_trace/eval/eval.qdb -o one.json --set physics.omega_values=[5.2] "
                           "physics.gamma_up_values=[3] physics.gamma_down_values=[3]");
    ASSERT_EQ(one.code, 0) << one.err;
    const Json single = Json::parse(slurp(work_dir() / "one.json"));
    for (const auto& c : single["checkpoints"]) EXPECT_EQ(c["posterior"][0], 1.0);

    ASSERT_EQ(run("generate -c tiny.json --set physics.mode=nonmarkovian -o nm").code, 0);
    const Result nm = run("bayes -c tiny.json -t nm/eval/eval.qdb -o nm.json");
    EXPECT_EQ(nm.code, 2);
    EXPECT_NE(nm.err.find("unsupported mode"), std::string::npos) << nm.err;
}

TEST_F(Cli, BayesTextTrace) {
    std::string text;
    for (int i = 0; i < 400; ++i) text += (i % 50 < 30 ? "1.0\n" : "0.0\n");
    write(work_dir() / "trace.txt", text);
    const Result r = run("bayes -c tiny.json -t trace.txt -o text.json");
    ASSERT_EQ(r.code, 0) << r.err;
    const Json post = Json::parse(slurp(work_dir() / "text.json"));
    EXPECT_EQ(post["trace"]["bins"], 400);
    EXPECT_EQ(post["checkpoints"].size(), 1u);  // only 1 us fits in a 4 us trace
}

TEST_F(Cli, Report) {
    ASSERT_EQ(run("train -c tiny.json -d data -m m1/model.qdm --metrics m1/metrics.csv").code, 0);
    ASSERT_EQ(run("generate -c tiny.json --set physics.mode=nonmarkovian -o nmdata").code, 0);
    ASSERT_EQ(run("train -c tiny.json --set physics.mode=nonmarkovian -d nmdata -m m2/model.qdm --metrics "
                  "m2/metrics.csv")
                  .code,
              0);
    ASSERT_EQ(run("report --metrics m1/metrics.csv m2/metrics.csv nothing/metrics.csv -o rep").code, 0);
    const std::string table = slurp(work_dir() / "rep" / "table.csv");
    std::istringstream rows(table);
    std::string header, markov, nonmarkov;
    std::getline(rows, header);
    std::getline(rows, markov);
    std::getline(rows, nonmarkov);
    EXPECT_EQ(header, "mode,T=500us,T=200us,T=50us,T=2us");
    EXPECT_EQ(markov.substr(0, 22), "markovian,n/a,n/a,n/a,");
    EXPECT_EQ(nonmarkov.substr(0, 25), "nonmarkovian,n/a,n/a,n/a,");
    EXPECT_NE(markov.substr(22), "n/a");
    EXPECT_NE(nonmarkov.substr(25), "n/a");
    EXPECT_TRUE(fs::exists(work_dir() / "rep" / "curves" / "curve_markovian_T2us_metrics.csv"));

    const std::string json = slurp(work_dir() / "rep" / "report.json");
    ASSERT_EQ(run("report --metrics m1/metrics.csv m2/metrics.csv nothing/metrics.csv -o rep").code, 0);
    EXPECT_EQ(slurp(work_dir() / "rep" / "table.csv"), table);
    EXPECT_EQ(slurp(work_dir() / "rep" / "report.json"), json);
}
