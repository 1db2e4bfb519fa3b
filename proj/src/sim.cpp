#include "qpcnet/sim.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "qpcnet/error.hpp"

namespace qpcnet::sim {

namespace {

constexpr double kAmplitudeStep = 0.001;  // 1 ns
constexpr int kBisectionIterations = 40;

// Real form of the amplitudes: c_down = a, c_up = -i b. Then
//   a' = -(omega/2) b,   b' = (omega/2) a - (gamma_up/2) b.
using Mat2 = std::array<double, 4>;  // row-major
using Vec2 = std::array<double, 2>;

Mat2 mul(const Mat2& x, const Mat2& y) {
    return {x[0] * y[0] + x[1] * y[2], x[0] * y[1] + x[1] * y[3],
            x[2] * y[0] + x[3] * y[2], x[2] * y[1] + x[3] * y[3]};
}

Vec2 mat_vec(const Mat2& m, const Vec2& v) {
    return {m[0] * v[0] + m[1] * v[1], m[2] * v[0] + m[3] * v[1]};
}

// One classical RK4 step of size h for the linear system y' = A y collapses
// to the matrix I + hA + (hA)^2/2 + (hA)^3/6 + (hA)^4/24.
Mat2 rk4_step_matrix(double omega, double gamma_up, double h) {
    const Mat2 ha{0.0, -0.5 * omega * h, 0.5 * omega * h, -0.5 * gamma_up * h};
    const Mat2 ha2 = mul(ha, ha);
    const Mat2 ha3 = mul(ha2, ha);
    const Mat2 ha4 = mul(ha3, ha);
    Mat2 out{};
    for (std::size_t i = 0; i < 4; ++i) {
        out[i] = ha[i] + ha2[i] / 2.0 + ha3[i] / 6.0 + ha4[i] / 24.0;
    }
    out[0] += 1.0;
    out[3] += 1.0;
    return out;
}

double norm2(const Vec2& v) { return v[0] * v[0] + v[1] * v[1]; }

}  // namespace

void TrajectoryParams::validate() const {
    if (!(omega >= 0.0) || !std::isfinite(omega)) {
        throw InvalidParameter("omega must be finite and >= 0, got " + std::to_string(omega));
    }
    if (!(gamma_up > 0.0) || !std::isfinite(gamma_up)) {
        throw InvalidParameter("gamma_up must be finite and > 0, got " + std::to_string(gamma_up));
    }
    if (!(gamma_down > 0.0) || !std::isfinite(gamma_down)) {
        throw InvalidParameter("gamma_down must be finite and > 0, got " + std::to_string(gamma_down));
    }
}

std::string_view to_string(Mode mode) {
    return mode == Mode::Markovian ? "markovian" : "nonmarkovian";
}

Mode mode_from_string(std::string_view text) {
    if (text == "markovian") return Mode::Markovian;
    if (text == "nonmarkovian" || text == "non-markovian") return Mode::NonMarkovian;
    throw InvalidParameter("unknown trace mode '" + std::string(text) + "'");
}

void NoiseConfig::validate() const {
    if (!(sigma_bin >= 0.0)) throw InvalidParameter("sigma_bin must be >= 0");
    if (!(filter_tau > 0.0)) throw InvalidParameter("filter_tau must be > 0");
    if (!(sigma_extra >= 0.0)) throw InvalidParameter("sigma_extra must be >= 0");
}

std::size_t bin_count(double duration, double dt) {
    if (!(dt > 0.0) || !(duration > 0.0)) {
        throw InvalidParameter("duration and dt must be positive");
    }
    const double n = std::round(duration / dt);
    if (n < 1.0) {
        throw InvalidParameter("duration shorter than one bin");
    }
    return static_cast<std::size_t>(n);
}

double sample_empty_dwell(double gamma_down, Rng& rng) {
    if (!(gamma_down > 0.0) || !std::isfinite(gamma_down)) {
        throw InvalidParameter("gamma_down must be finite and > 0");
    }
    return rng.exponential(gamma_down);
}

std::optional<double> sample_occupied_dwell(double omega, double gamma_up, Rng& rng, double horizon) {
    TrajectoryParams{omega, gamma_up, 1.0}.validate();
    if (omega == 0.0) {
        return std::nullopt;
    }
    const double threshold = rng.uniform_open();
    const Mat2 step = rk4_step_matrix(omega, gamma_up, kAmplitudeStep);

    Vec2 state{1.0, 0.0};
    double t = 0.0;
    while (t < horizon) {
        const Vec2 next = mat_vec(step, state);
        if (norm2(next) < threshold) {
            double lo = 0.0;
            double hi = kAmplitudeStep;
            for (int i = 0; i < kBisectionIterations; ++i) {
                const double mid = 0.5 * (lo + hi);
                const Vec2 probe = mat_vec(rk4_step_matrix(omega, gamma_up, mid), state);
                (norm2(probe) < threshold ? hi : lo) = mid;
            }
            const double jump = t + 0.5 * (lo + hi);
            if (jump >= horizon) {
                return std::nullopt;
            }
            return jump;
        }
        state = next;
        t += kAmplitudeStep;
    }
    return std::nullopt;
}

JumpRecord simulate_trajectory(const TrajectoryParams& params, double duration, Rng& rng) {
    params.validate();
    if (!(duration > 0.0) || !std::isfinite(duration)) {
        throw InvalidParameter("trajectory duration must be positive");
    }
    JumpRecord record;
    record.total_time = duration;
    double t = 0.0;
    while (true) {
        const double empty = sample_empty_dwell(params.gamma_down, rng);
        if (t + empty >= duration) {
            record.segments.push_back({Charge::Empty, duration - t});
            break;
        }
        record.segments.push_back({Charge::Empty, empty});
        t += empty;

        const auto occupied = sample_occupied_dwell(params.omega, params.gamma_up, rng, duration - t);
        if (!occupied || t + *occupied >= duration) {
            record.segments.push_back({Charge::Occupied, duration - t});
            break;
        }
        record.segments.push_back({Charge::Occupied, *occupied});
        t += *occupied;
    }
    return record;
}

CurrentTrace render_markovian(const JumpRecord& record, double dt, const NoiseConfig& noise, Rng& rng,
                              std::size_t n_bins) {
    noise.validate();
    if (n_bins == 0) {
        n_bins = bin_count(record.total_time, dt);
    }
    const double covered = static_cast<double>(n_bins) * dt;
    if (covered > record.total_time * (1.0 + 1e-12) + 1e-12) {
        throw InvalidParameter("jump record covers " + std::to_string(record.total_time) + " us but the trace needs " +
                               std::to_string(covered) + " us");
    }

    CurrentTrace trace;
    trace.dt = dt;
    trace.mode = Mode::Markovian;
    trace.samples.resize(n_bins);

    std::size_t seg = 0;
    double seg_start = 0.0;
    double seg_end = record.segments.empty() ? 0.0 : record.segments[0].duration;
    // The final segment extends to total_time; absorb rounding of the cumulative sum.
    const auto last_end = [&](std::size_t s) {
        return s + 1 == record.segments.size() ? std::max(seg_end, covered) : seg_end;
    };

    for (std::size_t b = 0; b < n_bins; ++b) {
        const double lo = static_cast<double>(b) * dt;
        const double hi = static_cast<double>(b + 1) * dt;
        double weighted = 0.0;
        double total = 0.0;
        while (seg < record.segments.size()) {
            const double end = last_end(seg);
            const double overlap = std::min(hi, end) - std::max(lo, seg_start);
            if (overlap > 0.0) {
                const double level =
                    record.segments[seg].charge == Charge::Empty ? kEmptyLevel : kOccupiedLevel;
                weighted += level * overlap;
                total += overlap;
            }
            if (end > hi) {
                break;
            }
            ++seg;
            seg_start = end;
            if (seg < record.segments.size()) {
                seg_end = seg_start + record.segments[seg].duration;
            }
        }
        if (!(total > 0.0)) {
            throw InvalidParameter("jump record does not cover bin " + std::to_string(b));
        }
        const double value = weighted / total + noise.sigma_bin * rng.normal();
        trace.samples[b] = static_cast<float>(value);
    }
    return trace;
}

std::vector<double> output_filter_kernel(double dt, double filter_tau) {
    if (!(filter_tau > 0.0)) {
        throw InvalidParameter("filter_tau must be > 0");
    }
    if (!(dt > 0.0)) {
        throw InvalidParameter("dt must be > 0");
    }
    const auto taps = static_cast<std::size_t>(std::floor(8.0 * filter_tau / dt + 1e-9)) + 1;
    std::vector<double> kernel(taps);
    double sum = 0.0;
    for (std::size_t j = 0; j < taps; ++j) {
        kernel[j] = std::exp(-static_cast<double>(j) * dt / filter_tau);
        sum += kernel[j];
    }
    for (double& u : kernel) {
        u /= sum;
    }
    return kernel;
}

CurrentTrace apply_output_filter(const CurrentTrace& trace, const NoiseConfig& noise, Rng& rng) {
    noise.validate();
    if (trace.mode != Mode::Markovian) {
        throw InvalidParameter("output filter expects a Markovian trace");
    }
    const std::vector<double> kernel = output_filter_kernel(trace.dt, noise.filter_tau);

    CurrentTrace out;
    out.dt = trace.dt;
    out.mode = Mode::NonMarkovian;
    out.samples.resize(trace.samples.size());
    const auto n = static_cast<std::ptrdiff_t>(trace.samples.size());
    const auto taps = static_cast<std::ptrdiff_t>(kernel.size());
    for (std::ptrdiff_t k = 0; k < n; ++k) {
        double acc = 0.0;
        for (std::ptrdiff_t j = 0; j < taps; ++j) {
            const std::ptrdiff_t src = k - j;
            acc += kernel[j] * (src >= 0 ? static_cast<double>(trace.samples[src]) : kEmptyLevel);
        }
        out.samples[k] = static_cast<float>(acc + noise.sigma_extra * rng.normal());
    }
    return out;
}

CurrentTrace synthesize(const TrajectoryParams& params, double duration, Mode mode, const NoiseConfig& noise,
                        std::uint64_t seed, double dt) {
    params.validate();
    noise.validate();
    const std::size_t n = bin_count(duration, dt);
    if (n % 4 != 0) {
        throw InvalidParameter("trace length " + std::to_string(n) + " is not divisible by 4");
    }
    Rng rng(seed);
    const JumpRecord record = simulate_trajectory(params, duration, rng);
    CurrentTrace trace = render_markovian(record, dt, noise, rng, n);
    if (mode == Mode::NonMarkovian) {
        trace = apply_output_filter(trace, noise, rng);
    }
    return trace;
}

}  // namespace qpcnet::sim
