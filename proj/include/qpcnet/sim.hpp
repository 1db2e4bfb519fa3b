#pragma once

// Stochastic trajectories of a driven quantum dot and their rendering into
// binned QPC current traces.
//
// Model: states {empty, down, up}. An empty dot is filled by a spin-down
// electron at rate gamma_down. While occupied, the spin precesses under
// H = (omega/2)(|down><up| + |up><down|) and leaves from |up> at rate
// gamma_up. The QPC sees only the charge, so between jumps the conditional
// charge is definite and the noiseless current is a two-level telegraph
// signal: empty = 1.0, occupied = 0.0.

#include <cstdint>
#include <limits>
#include <optional>
#include <string_view>
#include <vector>

#include "qpcnet/rng.hpp"

namespace qpcnet::sim {

inline constexpr double kEmptyLevel = 1.0;
inline constexpr double kOccupiedLevel = 0.0;
inline constexpr double kDefaultDt = 0.01;  // us (10 ns)

/// Rates in MHz; times are in microseconds throughout.
struct TrajectoryParams {
    double omega = 0.0;
    double gamma_up = 1.0;
    double gamma_down = 1.0;

    /// Throws InvalidParameter unless omega >= 0 and both rates are positive.
    void validate() const;

    bool operator==(const TrajectoryParams&) const = default;
};

enum class Charge : std::uint8_t { Empty = 0, Occupied = 1 };

struct Segment {
    Charge charge;
    double duration;
};

/// Telegraph record. Segments alternate strictly; the last one is truncated
/// so the durations sum to total_time.
struct JumpRecord {
    double total_time = 0.0;
    std::vector<Segment> segments;
};

enum class Mode : std::uint8_t { Markovian = 0, NonMarkovian = 1 };

std::string_view to_string(Mode mode);
Mode mode_from_string(std::string_view text);

struct NoiseConfig {
    double sigma_bin = 0.25;
    double filter_tau = 0.2;  // us
    double sigma_extra = 0.1;

    void validate() const;
};

struct CurrentTrace {
    double dt = kDefaultDt;
    std::vector<float> samples;
    Mode mode = Mode::Markovian;
};

/// Number of bins covering [0, duration] at resolution dt.
std::size_t bin_count(double duration, double dt);

/// Waiting time before a spin-down electron tunnels into the empty dot.
double sample_empty_dwell(double gamma_down, Rng& rng);

/// Waiting time before an electron that arrived in |down> tunnels out.
///
/// Monte-Carlo wave-function unraveling of the two-level non-Hermitian
/// evolution: the amplitudes are propagated with fixed 1 ns RK4 steps until
/// their squared norm falls below a uniform threshold, then the crossing is
/// located by bisection. Returns std::nullopt ("never") when omega == 0 or
/// when no jump happens before `horizon`.
std::optional<double> sample_occupied_dwell(double omega, double gamma_up, Rng& rng,
                                            double horizon = std::numeric_limits<double>::infinity());

/// Alternating empty/occupied dwells starting from an empty dot.
JumpRecord simulate_trajectory(const TrajectoryParams& params, double duration, Rng& rng);

/// Bin-averaged telegraph level plus Gaussian(0, sigma_bin) per bin.
/// `n_bins == 0` renders round(total_time / dt) bins; asking for more time
/// than the record covers throws InvalidParameter.
CurrentTrace render_markovian(const JumpRecord& record, double dt, const NoiseConfig& noise, Rng& rng,
                              std::size_t n_bins = 0);

/// Unit-sum causal exponential kernel u_j ~ exp(-j dt / tau), j dt <= 8 tau.
std::vector<double> output_filter_kernel(double dt, double filter_tau);

/// Convolve with the output filter and add Gaussian(0, sigma_extra) per bin.
/// History before t = 0 is the empty level.
CurrentTrace apply_output_filter(const CurrentTrace& trace, const NoiseConfig& noise, Rng& rng);

/// simulate_trajectory -> render_markovian -> (apply_output_filter), all
/// driven by one stream seeded with `seed`.
CurrentTrace synthesize(const TrajectoryParams& params, double duration, Mode mode,
                        const NoiseConfig& noise, std::uint64_t seed, double dt = kDefaultDt);

}  // namespace qpcnet::sim
