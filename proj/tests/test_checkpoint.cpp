#include <filesystem>

#include <gtest/gtest.h>

#include "qpcnet/checkpoint.hpp"
#include "qpcnet/error.hpp"

using namespace qpcnet;
using namespace qpcnet::nn;

namespace {

ModelConfig small() {
    ModelConfig c;
    c.input_len = 64;
    c.conv1_filters = 4;
    c.conv2_filters = 6;
    c.dense_units = 10;
    c.classes = 3;
    return c;
}

Checkpoint sample_checkpoint(bool with_optimizer) {
    Network<float> net(small());
    net.initialize(5);
    Checkpoint ck{small(), net.params(), std::nullopt};
    if (with_optimizer) {
        auto state = AdamState<float>::fresh(small(), {});
        state.step = 17;
        state.first_moment.fill(0.25f);
        state.second_moment.fill(1e-3f);
        ck.optimizer = state;
    }
    return ck;
}

FormatError::Kind kind_of(const std::vector<std::uint8_t>& bytes) {
    try {
        decode_checkpoint(bytes);
    } catch (const FormatError& e) {
        return e.kind();
    }
    ADD_FAILURE() << "decode did not throw";
    return FormatError::Kind::Io;
}

}  // namespace

TEST(Checkpoint, RoundTripBitExact) {
    for (bool opt : {false, true}) {
        const Checkpoint ck = sample_checkpoint(opt);
        const auto bytes = encode_checkpoint(ck);
        const Checkpoint back = decode_checkpoint(bytes);
        EXPECT_EQ(back, ck);
        EXPECT_EQ(encode_checkpoint(back), bytes);
    }
}

TEST(Checkpoint, File) {
    const auto path = std::filesystem::temp_directory_path() / "qpcnet_test_ck" / "model.qdm";
    const Checkpoint ck = sample_checkpoint(true);
    save_checkpoint(ck, path);
    EXPECT_EQ(load_checkpoint(path), ck);
    std::filesystem::remove_all(path.parent_path());
}

TEST(Checkpoint, Errors) {
    const auto bytes = encode_checkpoint(sample_checkpoint(true));
    auto bad = bytes;
    bad[1] = 'X';
    EXPECT_EQ(kind_of(bad), FormatError::Kind::BadMagic);
    bad = bytes;
    bad[4] = 7;
    EXPECT_EQ(kind_of(bad), FormatError::Kind::BadVersion);
    bad = bytes;
    bad.resize(bytes.size() - 3);
    EXPECT_EQ(kind_of(bad), FormatError::Kind::TruncatedPayload);
    bad = bytes;
    bad.push_back(1);
    EXPECT_EQ(kind_of(bad), FormatError::Kind::SizeMismatch);
}
