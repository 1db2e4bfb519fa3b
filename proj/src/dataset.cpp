#include "qpcnet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <thread>

#include "qpcnet/detail/bytes.hpp"
#include "qpcnet/error.hpp"

namespace qpcnet::dataset {

namespace {

constexpr std::string_view kMagic = "QDB1";
constexpr std::size_t kFixedHeaderBytes = 4 + 4 + 4 + 4 + 8 + 1 + 3;

std::vector<double> linspace(double lo, double hi, std::size_t n) {
    if (n == 1) return {lo};
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) {
        v[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    }
    return v;
}

void check_mode_byte(std::uint8_t mode) {
    if (mode > 1) {
        throw FormatError(FormatError::Kind::SizeMismatch, "unknown trace mode byte " + std::to_string(mode));
    }
}

DatasetHeader decode_header(detail::ByteReader& in) {
    if (in.remaining() < 4 || in.raw(4) != kMagic) {
        throw FormatError(FormatError::Kind::BadMagic, "bad magic: not a QDB1 dataset");
    }
    DatasetHeader h;
    h.version = in.u32();
    if (h.version != kDatasetVersion) {
        throw FormatError(FormatError::Kind::BadVersion, "unsupported dataset version " + std::to_string(h.version));
    }
    h.batch_size = in.u32();
    h.trace_len = in.u32();
    h.dt = in.f64();
    const std::uint8_t mode = in.u8();
    check_mode_byte(mode);
    h.mode = static_cast<sim::Mode>(mode);
    std::array<std::size_t, 3> sizes{};
    for (auto& s : sizes) s = in.u8();
    std::array<std::vector<double>*, 3> dims{&h.grid.omega_values, &h.grid.gamma_up_values,
                                            &h.grid.gamma_down_values};
    for (std::size_t p = 0; p < 3; ++p) {
        dims[p]->resize(sizes[p]);
        for (double& v : *dims[p]) v = in.f64();
    }
    if (h.trace_len == 0 || !(h.dt > 0.0)) {
        throw FormatError(FormatError::Kind::SizeMismatch, "header declares an empty trace or non-positive dt");
    }
    try {
        h.grid.validate();
    } catch (const InvalidParameter& e) {
        throw FormatError(FormatError::Kind::SizeMismatch, std::string("invalid grid in header: ") + e.what());
    }
    return h;
}

std::size_t payload_bytes(const DatasetHeader& h) {
    return static_cast<std::size_t>(h.batch_size) * (4 * static_cast<std::size_t>(h.trace_len) + 3);
}

}  // namespace

ParamGrid ParamGrid::evenly_spaced(std::size_t size) {
    if (size == 0 || size > 255) {
        throw InvalidParameter("grid size must be in 1..255");
    }
    if (size == 6) {
        return ParamGrid{};
    }
    ParamGrid g;
    g.omega_values = linspace(4.0, 10.0, size);
    g.gamma_up_values = linspace(1.0, 6.0, size);
    g.gamma_down_values = linspace(1.0, 6.0, size);
    return g;
}

const std::vector<double>& ParamGrid::values(std::size_t parameter) const {
    switch (parameter) {
        case 0: return omega_values;
        case 1: return gamma_up_values;
        case 2: return gamma_down_values;
        default: throw InvalidParameter("parameter index must be 0, 1 or 2");
    }
}

std::array<std::size_t, 3> ParamGrid::sizes() const {
    return {omega_values.size(), gamma_up_values.size(), gamma_down_values.size()};
}

std::size_t ParamGrid::class_count() const {
    const auto s = sizes();
    return s[0] * s[1] * s[2];
}

sim::TrajectoryParams ParamGrid::params_at(const LabelIndices& idx) const {
    for (std::size_t p = 0; p < 3; ++p) {
        if (idx[p] >= values(p).size()) {
            throw InvalidParameter("grid index out of range for parameter " + std::to_string(p));
        }
    }
    return {omega_values[idx[0]], gamma_up_values[idx[1]], gamma_down_values[idx[2]]};
}

void ParamGrid::validate() const {
    static constexpr std::array<const char*, 3> names{"omega_values", "gamma_up_values", "gamma_down_values"};
    for (std::size_t p = 0; p < 3; ++p) {
        const auto& v = values(p);
        if (v.empty() || v.size() > 255) {
            throw InvalidParameter(std::string(names[p]) + " must hold 1..255 values");
        }
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!(v[i] > 0.0) || !std::isfinite(v[i])) {
                throw InvalidParameter(std::string(names[p]) + " must be positive and finite");
            }
            if (i > 0 && !(v[i] > v[i - 1])) {
                throw InvalidParameter(std::string(names[p]) + " must be strictly ascending");
            }
        }
    }
}

Label sample_label(const ParamGrid& grid, Rng& rng) {
    Label label{};
    for (std::size_t p = 0; p < 3; ++p) {
        label.indices[p] = static_cast<std::uint8_t>(rng.below(grid.values(p).size()));
    }
    label.params = grid.params_at(label.indices);
    return label;
}

std::vector<float> to_one_hot(const LabelIndices& indices, const std::array<std::size_t, 3>& sizes) {
    std::vector<float> out(sizes[0] + sizes[1] + sizes[2], 0.0f);
    std::size_t offset = 0;
    for (std::size_t p = 0; p < 3; ++p) {
        if (indices[p] >= sizes[p]) {
            throw InvalidParameter("label index " + std::to_string(indices[p]) + " out of range for parameter " +
                                   std::to_string(p) + " of size " + std::to_string(sizes[p]));
        }
        out[offset + indices[p]] = 1.0f;
        offset += sizes[p];
    }
    return out;
}

std::span<const float> LabeledBatch::trace(std::size_t i) const {
    return std::span<const float>(samples).subspan(i * trace_len, trace_len);
}

sim::CurrentTrace LabeledBatch::current_trace(std::size_t i) const {
    const auto s = trace(i);
    return {dt, std::vector<float>(s.begin(), s.end()), mode};
}

std::vector<float> LabeledBatch::targets() const {
    const auto sizes = grid.sizes();
    const std::size_t width = sizes[0] + sizes[1] + sizes[2];
    std::vector<float> out;
    out.reserve(size() * width);
    for (const auto& label : labels) {
        const auto row = to_one_hot(label, sizes);
        out.insert(out.end(), row.begin(), row.end());
    }
    return out;
}

void LabeledBatch::validate() const {
    if (trace_len == 0) throw ShapeError("batch has zero-length traces");
    if (samples.size() != labels.size() * trace_len) {
        throw ShapeError("batch holds " + std::to_string(samples.size()) + " samples for " +
                         std::to_string(labels.size()) + " traces of length " + std::to_string(trace_len));
    }
    const auto sizes = grid.sizes();
    for (const auto& label : labels) {
        for (std::size_t p = 0; p < 3; ++p) {
            if (label[p] >= sizes[p]) throw ShapeError("label index out of range");
        }
    }
}

LabeledBatch generate_batch(const BatchSpec& spec, std::uint64_t master_seed, unsigned workers) {
    spec.grid.validate();
    spec.noise.validate();
    if (spec.batch_size == 0) {
        throw InvalidParameter("batch size must be >= 1");
    }
    const std::size_t n = sim::bin_count(spec.duration, spec.dt);
    if (n % 4 != 0) {
        throw InvalidParameter("trace length " + std::to_string(n) + " is not divisible by 4");
    }

    LabeledBatch batch;
    batch.grid = spec.grid;
    batch.dt = spec.dt;
    batch.mode = spec.mode;
    batch.trace_len = n;
    batch.samples.resize(spec.batch_size * n);
    batch.labels.resize(spec.batch_size);

    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            const std::uint64_t stream = derive_seed(master_seed, i);
            Rng label_rng(derive_seed(stream, 0));
            const Label label = sample_label(spec.grid, label_rng);
            const sim::CurrentTrace trace =
                sim::synthesize(label.params, spec.duration, spec.mode, spec.noise, derive_seed(stream, 1), spec.dt);
            batch.labels[i] = label.indices;
            std::copy(trace.samples.begin(), trace.samples.end(), batch.samples.begin() + i * n);
        }
    };

    workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(spec.batch_size)));
    if (workers == 1) {
        work(0, spec.batch_size);
        return batch;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    const std::size_t chunk = (spec.batch_size + workers - 1) / workers;
    for (unsigned w = 0; w < workers; ++w) {
        const std::size_t begin = std::min(spec.batch_size, w * chunk);
        const std::size_t end = std::min(spec.batch_size, begin + chunk);
        pool.emplace_back([&, w, begin, end] {
            try {
                work(begin, end);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return batch;
}

std::vector<std::uint8_t> encode_batch(const LabeledBatch& batch) {
    batch.validate();
    batch.grid.validate();
    detail::ByteWriter out;
    out.raw(kMagic);
    out.u32(kDatasetVersion);
    out.u32(static_cast<std::uint32_t>(batch.size()));
    out.u32(static_cast<std::uint32_t>(batch.trace_len));
    out.f64(batch.dt);
    out.u8(static_cast<std::uint8_t>(batch.mode));
    for (std::size_t s : batch.grid.sizes()) out.u8(static_cast<std::uint8_t>(s));
    for (std::size_t p = 0; p < 3; ++p) {
        for (double v : batch.grid.values(p)) out.f64(v);
    }
    out.f32s(batch.samples);
    for (const auto& label : batch.labels) {
        for (std::uint8_t idx : label) out.u8(idx);
    }
    return std::move(out.bytes());
}

LabeledBatch decode_batch(std::span<const std::uint8_t> bytes) {
    detail::ByteReader in(bytes);
    const DatasetHeader h = decode_header(in);
    const std::size_t expected = payload_bytes(h);
    if (in.remaining() < expected) {
        throw FormatError(FormatError::Kind::TruncatedPayload,
                          "truncated payload: header declares " + std::to_string(h.batch_size) + " traces of " +
                              std::to_string(h.trace_len) + " samples but only " + std::to_string(in.remaining()) +
                              " payload bytes follow (need " + std::to_string(expected) + ")");
    }
    if (in.remaining() > expected) {
        throw FormatError(FormatError::Kind::SizeMismatch,
                          std::to_string(in.remaining() - expected) + " unexpected bytes after payload");
    }
    LabeledBatch batch;
    batch.grid = h.grid;
    batch.dt = h.dt;
    batch.mode = h.mode;
    batch.trace_len = h.trace_len;
    batch.samples.resize(static_cast<std::size_t>(h.batch_size) * h.trace_len);
    in.f32s(batch.samples);
    batch.labels.resize(h.batch_size);
    const auto sizes = h.grid.sizes();
    for (auto& label : batch.labels) {
        for (std::size_t p = 0; p < 3; ++p) {
            label[p] = in.u8();
            if (label[p] >= sizes[p]) {
                throw FormatError(FormatError::Kind::SizeMismatch, "label index exceeds grid size");
            }
        }
    }
    return batch;
}

void write_batch(const LabeledBatch& batch, const std::filesystem::path& path) {
    detail::write_file(path, encode_batch(batch));
}

LabeledBatch read_batch(const std::filesystem::path& path) {
    return decode_batch(detail::read_file(path));
}

DatasetHeader read_header(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError(FormatError::Kind::Io, "cannot open " + path.string());
    }
    std::vector<std::uint8_t> head(kFixedHeaderBytes);
    in.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
    head.resize(static_cast<std::size_t>(in.gcount()));
    if (head.size() >= kFixedHeaderBytes) {
        const std::size_t grid_bytes = 8 * (std::size_t{head[25]} + head[26] + head[27]);
        head.resize(kFixedHeaderBytes + grid_bytes);
        in.read(reinterpret_cast<char*>(head.data() + kFixedHeaderBytes), static_cast<std::streamsize>(grid_bytes));
        head.resize(kFixedHeaderBytes + static_cast<std::size_t>(in.gcount()));
    }
    detail::ByteReader reader(head);
    const DatasetHeader h = decode_header(reader);

    const auto file_size = std::filesystem::file_size(path);
    const std::size_t expected = head.size() + payload_bytes(h);
    if (file_size < expected) {
        throw FormatError(FormatError::Kind::TruncatedPayload, "truncated payload in " + path.string());
    }
    if (file_size > expected) {
        throw FormatError(FormatError::Kind::SizeMismatch, "unexpected trailing bytes in " + path.string());
    }
    return h;
}

}  // namespace qpcnet::dataset
