#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "qpcnet/rng.hpp"
#include "qpcnet/sim.hpp"

namespace qpcnet::dataset {

using LabelIndices = std::array<std::uint8_t, 3>;  // (omega, gamma_up, gamma_down)

/// Candidate values per parameter, MHz.
struct ParamGrid {
    std::vector<double> omega_values{4.0, 5.2, 6.4, 7.6, 8.8, 10.0};
    std::vector<double> gamma_up_values{1.0, 2.0, 3.0, 4.0, 5.0, 6.0};
    std::vector<double> gamma_down_values{1.0, 2.0, 3.0, 4.0, 5.0, 6.0};

    /// `size` equidistant values per parameter over omega in [4, 10] and
    /// gamma in [1, 6]. evenly_spaced(6) is the default grid.
    static ParamGrid evenly_spaced(std::size_t size);

    const std::vector<double>& values(std::size_t parameter) const;
    std::array<std::size_t, 3> sizes() const;
    std::size_t class_count() const;
    sim::TrajectoryParams params_at(const LabelIndices& idx) const;

    /// Strictly ascending, positive, 1..255 values per parameter.
    void validate() const;

    bool operator==(const ParamGrid&) const = default;
};

struct Label {
    LabelIndices indices;
    sim::TrajectoryParams params;
};

/// Independent uniform index per dimension.
Label sample_label(const ParamGrid& grid, Rng& rng);

/// Flattened one-hot target: row p (length sizes[p]) has a 1 at indices[p].
std::vector<float> to_one_hot(const LabelIndices& indices, const std::array<std::size_t, 3>& sizes);

/// M traces of equal length with their grid labels. Samples are stored
/// trace-major, which is also the network input layout [M x N x 1].
struct LabeledBatch {
    ParamGrid grid;
    double dt = sim::kDefaultDt;
    sim::Mode mode = sim::Mode::Markovian;
    std::size_t trace_len = 0;
    std::vector<float> samples;
    std::vector<LabelIndices> labels;

    std::size_t size() const { return labels.size(); }
    std::span<const float> trace(std::size_t i) const;
    sim::CurrentTrace current_trace(std::size_t i) const;

    /// Targets [M x sum(sizes)]; equals [M x 3 x K] on square grids.
    std::vector<float> targets() const;

    /// Throws ShapeError if the invariants are broken.
    void validate() const;

    bool operator==(const LabeledBatch&) const = default;
};

struct BatchSpec {
    ParamGrid grid;
    std::size_t batch_size = 1000;
    double duration = 50.0;  // us
    double dt = sim::kDefaultDt;
    sim::Mode mode = sim::Mode::Markovian;
    sim::NoiseConfig noise;
};

/// Trace i uses stream seeds derived from (master_seed, i) only, so the
/// result does not depend on `workers`.
LabeledBatch generate_batch(const BatchSpec& spec, std::uint64_t master_seed, unsigned workers = 1);

// QDB1 on-disk format, little-endian:
//   "QDB1" | u32 version | u32 M | u32 N | f64 dt_us | u8 mode | u8[3] grid sizes
//   | f64 grid values (omega, gamma_up, gamma_down) | M x f32[N] | M x u8[3]
inline constexpr std::uint32_t kDatasetVersion = 1;

struct DatasetHeader {
    std::uint32_t version = kDatasetVersion;
    std::uint32_t batch_size = 0;
    std::uint32_t trace_len = 0;
    double dt = 0.0;
    sim::Mode mode = sim::Mode::Markovian;
    ParamGrid grid;
};

void write_batch(const LabeledBatch& batch, const std::filesystem::path& path);
LabeledBatch read_batch(const std::filesystem::path& path);
/// Parses and checks only the header; also verifies the file size.
DatasetHeader read_header(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_batch(const LabeledBatch& batch);
LabeledBatch decode_batch(std::span<const std::uint8_t> bytes);

}  // namespace qpcnet::dataset
