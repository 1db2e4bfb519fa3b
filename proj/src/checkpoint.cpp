#include "qpcnet/checkpoint.hpp"

#include "qpcnet/detail/bytes.hpp"

namespace qpcnet::nn {

namespace {

constexpr std::string_view kMagic = "QDM1";

void put_blocks(detail::ByteWriter& out, const Parameters<float>& p) {
    for (const auto& block : p.blocks) out.f32s(block.data);
}

void get_blocks(detail::ByteReader& in, Parameters<float>& p) {
    for (auto& block : p.blocks) in.f32s(block.data);
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
    const ModelConfig& c = ckpt.config;
    c.validate();
    if (!ckpt.params.congruent(Parameters<float>::zeros(c))) {
        throw ShapeError("checkpoint parameters do not match the model config");
    }
    detail::ByteWriter out;
    out.raw(kMagic);
    out.u32(kCheckpointVersion);
    for (std::size_t v : {c.input_len, c.kernel, c.conv1_filters, c.conv2_filters, c.dense_units, c.classes}) {
        out.u32(static_cast<std::uint32_t>(v));
    }
    out.f64(c.dropout_rate);
    put_blocks(out, ckpt.params);
    out.u8(ckpt.optimizer ? 1 : 0);
    if (ckpt.optimizer) {
        const auto& opt = *ckpt.optimizer;
        if (!ckpt.params.congruent(opt.first_moment) || !ckpt.params.congruent(opt.second_moment)) {
            throw ShapeError("checkpoint optimizer moments do not match the model");
        }
        out.u64(opt.step);
        out.f64(opt.hyper.learning_rate);
        out.f64(opt.hyper.beta1);
        out.f64(opt.hyper.beta2);
        out.f64(opt.hyper.epsilon);
        put_blocks(out, opt.first_moment);
        put_blocks(out, opt.second_moment);
    }
    return std::move(out.bytes());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    detail::ByteReader in(bytes);
    if (in.remaining() < 4 || in.raw(4) != kMagic) {
        throw FormatError(FormatError::Kind::BadMagic, "bad magic: not a QDM1 checkpoint");
    }
    const std::uint32_t version = in.u32();
    if (version != kCheckpointVersion) {
        throw FormatError(FormatError::Kind::BadVersion, "unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint ckpt;
    ModelConfig& c = ckpt.config;
    c.input_len = in.u32();
    c.kernel = in.u32();
    c.conv1_filters = in.u32();
    c.conv2_filters = in.u32();
    c.dense_units = in.u32();
    c.classes = in.u32();
    c.dropout_rate = in.f64();
    try {
        c.validate();
    } catch (const InvalidParameter& e) {
        throw FormatError(FormatError::Kind::SizeMismatch, std::string("invalid model config: ") + e.what());
    }
    ckpt.params = Parameters<float>::zeros(c);
    get_blocks(in, ckpt.params);
    const std::uint8_t has_optimizer = in.u8();
    if (has_optimizer > 1) {
        throw FormatError(FormatError::Kind::SizeMismatch, "bad optimizer flag");
    }
    if (has_optimizer) {
        AdamState<float> opt = AdamState<float>::fresh(c, {});
        opt.step = in.u64();
        opt.hyper.learning_rate = in.f64();
        opt.hyper.beta1 = in.f64();
        opt.hyper.beta2 = in.f64();
        opt.hyper.epsilon = in.f64();
        get_blocks(in, opt.first_moment);
        get_blocks(in, opt.second_moment);
        ckpt.optimizer = std::move(opt);
    }
    if (in.remaining() != 0) {
        throw FormatError(FormatError::Kind::SizeMismatch,
                          std::to_string(in.remaining()) + " unexpected bytes after checkpoint payload");
    }
    return ckpt;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
    detail::write_file(path, encode_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(detail::read_file(path));
}

}  // namespace qpcnet::nn
