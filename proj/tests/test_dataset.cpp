#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "qpcnet/dataset.hpp"
#include "qpcnet/error.hpp"

using namespace qpcnet;
using namespace qpcnet::dataset;

namespace {

BatchSpec small_spec(std::size_t m = 12, sim::Mode mode = sim::Mode::Markovian) {
    BatchSpec spec;
    spec.grid = ParamGrid::evenly_spaced(3);
    spec.batch_size = m;
    spec.duration = 2.0;
    spec.mode = mode;
    return spec;
}

FormatError::Kind decode_kind(const std::vector<std::uint8_t>& bytes) {
    try {
        decode_batch(bytes);
    } catch (const FormatError& e) {
        return e.kind();
    }
    ADD_FAILURE() << "decode did not throw";
    return FormatError::Kind::Io;
}

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("qpcnet_test_" + name);
}

}  // namespace

TEST(Grid, DefaultValues) {
    const ParamGrid g;
    EXPECT_EQ(g.sizes(), (std::array<std::size_t, 3>{6, 6, 6}));
    EXPECT_EQ(g.class_count(), 216u);
    EXPECT_EQ(g.omega_values.front(), 4.0);
    EXPECT_EQ(g.omega_values[1], 5.2);
    EXPECT_EQ(g.omega_values.back(), 10.0);
    EXPECT_EQ(ParamGrid::evenly_spaced(6), g);
    const ParamGrid three = ParamGrid::evenly_spaced(3);
    EXPECT_EQ(three.omega_values, (std::vector<double>{4.0, 7.0, 10.0}));
    EXPECT_EQ(three.gamma_up_values, (std::vector<double>{1.0, 3.5, 6.0}));
}

TEST(Grid, Validation) {
    ParamGrid g;
    g.omega_values = {5.0, 4.0};
    EXPECT_THROW(g.validate(), Error);
    g.omega_values = {};
    EXPECT_THROW(g.validate(), Error);
    g = ParamGrid{};
    g.gamma_up_values = {0.0, 1.0};
    EXPECT_THROW(g.validate(), Error);
}

TEST(Labels, OneHot) {
    const auto t = to_one_hot({2, 0, 5}, {6, 6, 6});
    ASSERT_EQ(t.size(), 18u);
    for (std::size_t i = 0; i < 18; ++i) {
        const bool hot = i == 2 || i == 6 || i == 17;
        EXPECT_EQ(t[i], hot ? 1.0f : 0.0f) << i;
    }
}

TEST(Labels, UniformOverGrid) {
    // Chi-square over the 216 classes.
    const ParamGrid g;
    Rng rng(12);
    std::vector<int> counts(216, 0);
    const int n = 216 * 200;
    for (int i = 0; i < n; ++i) {
        const Label l = sample_label(g, rng);
        ++counts[(l.indices[0] * 6 + l.indices[1]) * 6 + l.indices[2]];
        ASSERT_EQ(l.params, g.params_at(l.indices));
    }
    double chi2 = 0;
    for (int c : counts) chi2 += (c - 200.0) * (c - 200.0) / 200.0;
    EXPECT_LT(chi2, 300.0);  // 215 dof, p ~ 1e-4
}

TEST(Batch, ShapesAndLabels) {
    const LabeledBatch b = generate_batch(small_spec(), 5);
    EXPECT_EQ(b.size(), 12u);
    EXPECT_EQ(b.trace_len, 200u);
    EXPECT_EQ(b.samples.size(), 12u * 200u);
    EXPECT_NO_THROW(b.validate());
    const auto targets = b.targets();
    ASSERT_EQ(targets.size(), 12u * 9u);
    for (std::size_t i = 0; i < b.size(); ++i) {
        for (std::size_t p = 0; p < 3; ++p) EXPECT_EQ(targets[i * 9 + p * 3 + b.labels[i][p]], 1.0f);
    }
}

TEST(Batch, WorkerCountDoesNotMatter) {
    for (auto mode : {sim::Mode::Markovian, sim::Mode::NonMarkovian}) {
        const LabeledBatch one = generate_batch(small_spec(13, mode), 77, 1);
        const LabeledBatch four = generate_batch(small_spec(13, mode), 77, 4);
        EXPECT_EQ(one, four);
        EXPECT_EQ(encode_batch(one), encode_batch(four));
    }
}

TEST(Batch, SeedsDiffer) {
    EXPECT_NE(generate_batch(small_spec(), 1).samples, generate_batch(small_spec(), 2).samples);
}

TEST(Batch, RejectsBadLength) {
    BatchSpec spec = small_spec();
    spec.duration = 0.05;
    EXPECT_THROW(generate_batch(spec, 1), InvalidParameter);
}

TEST(Format, RoundTripBitExact) {
    const LabeledBatch b = generate_batch(small_spec(7, sim::Mode::NonMarkovian), 3);
    const auto bytes = encode_batch(b);
    EXPECT_EQ(bytes.size(), 28u + 9u * 8u + 7u * 200u * 4u + 7u * 3u);
    const LabeledBatch back = decode_batch(bytes);
    EXPECT_EQ(back, b);
    EXPECT_EQ(encode_batch(back), bytes);

    const auto path = temp_path("roundtrip.qdb");
    write_batch(b, path);
    EXPECT_EQ(read_batch(path), b);
    const DatasetHeader h = read_header(path);
    EXPECT_EQ(h.batch_size, 7u);
    EXPECT_EQ(h.trace_len, 200u);
    EXPECT_EQ(h.mode, sim::Mode::NonMarkovian);
    EXPECT_EQ(h.grid, b.grid);
    std::filesystem::remove(path);
}

TEST(Format, Errors) {
    const auto bytes = encode_batch(generate_batch(small_spec(3), 3));

    auto bad = bytes;
    bad[0] = 'X';
    EXPECT_EQ(decode_kind(bad), FormatError::Kind::BadMagic);

    bad = bytes;
    bad[4] = 2;
    EXPECT_EQ(decode_kind(bad), FormatError::Kind::BadVersion);

    bad = bytes;
    bad.pop_back();
    EXPECT_EQ(decode_kind(bad), FormatError::Kind::TruncatedPayload);

    bad = std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 10);
    EXPECT_EQ(decode_kind(bad), FormatError::Kind::TruncatedPayload);

    bad = bytes;
    bad.push_back(0);
    EXPECT_EQ(decode_kind(bad), FormatError::Kind::SizeMismatch);

    bad = bytes;
    bad.back() = 9;  // label index beyond the 3-value grid
    EXPECT_EQ(decode_kind(bad), FormatError::Kind::SizeMismatch);
}

TEST(Format, HeaderChecksFileSize) {
    const auto path = temp_path("short.qdb");
    auto bytes = encode_batch(generate_batch(small_spec(3), 3));
    bytes.resize(bytes.size() - 5);
    {
        std::ofstream out(path, std::ios::binary);
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }
    try {
        read_header(path);
        ADD_FAILURE() << "expected a truncated payload error";
    } catch (const FormatError& e) {
        EXPECT_EQ(e.kind(), FormatError::Kind::TruncatedPayload);
    }
    std::filesystem::remove(path);
}

TEST(Format, MissingFile) {
    try {
        read_batch(temp_path("does_not_exist.qdb"));
        ADD_FAILURE();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.kind(), FormatError::Kind::Io);
    }
}
