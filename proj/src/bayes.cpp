#include "qpcnet/bayes.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numbers>
#include <string>
#include <thread>

#include "qpcnet/error.hpp"

namespace qpcnet::bayes {

namespace {

constexpr std::size_t kDim = 5;
using Vec5 = std::array<double, kDim>;
using Mat5 = std::array<double, kDim * kDim>;

constexpr double kTraceTolerance = 1e-8;

Vec5 pack(const FilterState& s) { return {s.p_empty, s.rho_dd, s.rho_uu, s.coh_re, s.coh_im}; }

FilterState unpack(const Vec5& v, double log_weight) { return {v[0], v[1], v[2], v[3], v[4], log_weight}; }

Mat5 mul(const Mat5& a, const Mat5& b) {
    Mat5 c{};
    for (std::size_t i = 0; i < kDim; ++i) {
        for (std::size_t k = 0; k < kDim; ++k) {
            const double aik = a[i * kDim + k];
            for (std::size_t j = 0; j < kDim; ++j) c[i * kDim + j] += aik * b[k * kDim + j];
        }
    }
    return c;
}

Vec5 mat_vec(const Mat5& a, const Vec5& v) {
    Vec5 out{};
    for (std::size_t i = 0; i < kDim; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < kDim; ++j) acc += a[i * kDim + j] * v[j];
        out[i] = acc;
    }
    return out;
}

// RK4 for y' = A y is y <- (I + hA + (hA)^2/2 + (hA)^3/6 + (hA)^4/24) y.
Mat5 rk4_matrix(const Generator& a, double h) {
    Mat5 ha{};
    for (std::size_t i = 0; i < ha.size(); ++i) ha[i] = h * a[i];
    const Mat5 ha2 = mul(ha, ha);
    const Mat5 ha3 = mul(ha2, ha);
    const Mat5 ha4 = mul(ha3, ha);
    Mat5 out{};
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ha[i] + ha2[i] / 2.0 + ha3[i] / 6.0 + ha4[i] / 24.0;
    for (std::size_t i = 0; i < kDim; ++i) out[i * kDim + i] += 1.0;
    return out;
}

// Per-bin sector likelihoods shared by all candidates: weights relative to
// exp(log_scale) so they never underflow together.
struct BinLikelihood {
    double empty;
    double occupied;
    double log_scale;
};

BinLikelihood bin_likelihood(double y, double sigma, const Levels& levels) {
    const double inv = 1.0 / (2.0 * sigma * sigma);
    const double e0 = -(y - levels.empty) * (y - levels.empty) * inv;
    const double e1 = -(y - levels.occupied) * (y - levels.occupied) * inv;
    const double peak = std::max(e0, e1);
    return {std::exp(e0 - peak), std::exp(e1 - peak), peak - std::log(sigma * std::sqrt(2.0 * std::numbers::pi))};
}

FilterState weigh(const FilterState& s, const BinLikelihood& lk, std::size_t bin) {
    FilterState out = s;
    out.p_empty *= lk.empty;
    out.rho_dd *= lk.occupied;
    out.rho_uu *= lk.occupied;
    out.coh_re *= lk.occupied;
    out.coh_im *= lk.occupied;
    const double total = out.trace();
    if (!(total > 0.0) || !std::isfinite(total)) {
        throw UnderflowError(bin, "likelihood weight vanished");
    }
    const double inv = 1.0 / total;
    out.p_empty *= inv;
    out.rho_dd *= inv;
    out.rho_uu *= inv;
    out.coh_re *= inv;
    out.coh_im *= inv;
    out.log_weight = s.log_weight + lk.log_scale + std::log(total);
    return out;
}

}  // namespace

std::array<double, 2> FilterState::occupied_eigenvalues() const {
    const double mean = 0.5 * (rho_dd + rho_uu);
    const double half_gap = 0.5 * std::sqrt((rho_dd - rho_uu) * (rho_dd - rho_uu) +
                                            4.0 * (coh_re * coh_re + coh_im * coh_im));
    return {mean - half_gap, mean + half_gap};
}

Generator generator(const sim::TrajectoryParams& params) {
    params.validate();
    const double w = params.omega;
    const double gu = params.gamma_up;
    const double gd = params.gamma_down;
    // Rows: d/dt of (p_empty, rho_dd, rho_uu, coh_re, coh_im).
    return Generator{
        -gd, 0.0,      gu,       0.0,       0.0,       //
        gd,  0.0,      0.0,      0.0,       -w,        //
        0.0, 0.0,      -gu,      0.0,       w,         //
        0.0, 0.0,      0.0,      -0.5 * gu, 0.0,       //
        0.0, 0.5 * w,  -0.5 * w, 0.0,       -0.5 * gu  //
    };
}

FilterState lindblad_step(const FilterState& state, const sim::TrajectoryParams& params, double dt_sub) {
    if (!(dt_sub > 0.0)) throw InvalidParameter("sub-step must be positive");
    const Generator a = generator(params);
    const Vec5 y = pack(state);
    const auto f = [&](const Vec5& v) { return mat_vec(a, v); };
    const auto axpy = [](const Vec5& v, const Vec5& d, double h) {
        Vec5 out{};
        for (std::size_t i = 0; i < kDim; ++i) out[i] = v[i] + h * d[i];
        return out;
    };
    const Vec5 k1 = f(y);
    const Vec5 k2 = f(axpy(y, k1, dt_sub / 2));
    const Vec5 k3 = f(axpy(y, k2, dt_sub / 2));
    const Vec5 k4 = f(axpy(y, k3, dt_sub));
    Vec5 next{};
    for (std::size_t i = 0; i < kDim; ++i) next[i] = y[i] + dt_sub / 6.0 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]);
    return unpack(next, state.log_weight);
}

FilterState measurement_update(const FilterState& state, double y, double sigma, Levels levels, std::size_t bin) {
    if (!(sigma > 0.0)) throw InvalidParameter("sigma_bin must be positive for the likelihood filter");
    return weigh(state, bin_likelihood(y, sigma, levels), bin);
}

std::vector<double> normalize_log_weights(const std::vector<double>& log_weights) {
    if (log_weights.empty()) return {};
    const double peak = *std::max_element(log_weights.begin(), log_weights.end());
    std::vector<double> out(log_weights.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::exp(log_weights[i] - peak);
        sum += out[i];
    }
    for (double& v : out) v /= sum;
    return out;
}

PosteriorSeries run_filter(const sim::CurrentTrace& trace, const ParamGrid& grid, const FilterOptions& options) {
    if (trace.mode != sim::Mode::Markovian) {
        throw UnsupportedMode(
            "the likelihood filter only supports Markovian traces; filtered (non-Markovian) currents have no "
            "tractable likelihood");
    }
    grid.validate();
    if (!(options.sigma_bin > 0.0)) throw InvalidParameter("sigma_bin must be positive");
    if (options.substeps == 0) throw InvalidParameter("substeps must be positive");
    if (trace.samples.empty()) throw InvalidParameter("empty trace");

    const std::size_t n = trace.samples.size();
    std::vector<std::pair<double, std::size_t>> checkpoints;  // (time, bins processed)
    for (double t : options.checkpoints) {
        const auto bins = static_cast<std::size_t>(std::llround(t / trace.dt));
        if (bins >= 1 && bins <= n) checkpoints.emplace_back(t, bins);
    }
    std::sort(checkpoints.begin(), checkpoints.end());

    std::vector<BinLikelihood> lk(n);
    for (std::size_t b = 0; b < n; ++b) {
        lk[b] = bin_likelihood(static_cast<double>(trace.samples[b]), options.sigma_bin, options.levels);
    }

    const auto sizes = grid.sizes();
    const std::size_t candidates = grid.class_count();
    // log_weights[c][checkpoint]
    std::vector<std::vector<double>> log_weights(candidates, std::vector<double>(checkpoints.size()));

    const auto run_candidate = [&](std::size_t c) {
        const LabelIndices idx{static_cast<std::uint8_t>(c / (sizes[1] * sizes[2])),
                               static_cast<std::uint8_t>((c / sizes[2]) % sizes[1]),
                               static_cast<std::uint8_t>(c % sizes[2])};
        const sim::TrajectoryParams params = grid.params_at(idx);
        const Mat5 sub = rk4_matrix(generator(params), trace.dt / static_cast<double>(options.substeps));
        Mat5 bin_step = sub;
        for (std::size_t s = 1; s < options.substeps; ++s) bin_step = mul(sub, bin_step);

        FilterState state;
        std::size_t next = 0;
        for (std::size_t b = 0; b < n; ++b) {
            state = unpack(mat_vec(bin_step, pack(state)), state.log_weight);
            if (std::abs(state.trace() - 1.0) > kTraceTolerance) {
                throw IntegrationError("trace drifted to " + std::to_string(state.trace()) + " at bin " +
                                       std::to_string(b));
            }
            state = weigh(state, lk[b], b);
            while (next < checkpoints.size() && checkpoints[next].second == b + 1) {
                log_weights[c][next++] = state.log_weight;
            }
        }
    };

    const unsigned workers = std::max(1u, std::min<unsigned>(options.workers, static_cast<unsigned>(candidates)));
    std::vector<std::exception_ptr> errors(candidates);
    const auto guarded = [&](std::size_t c) {
        try {
            run_candidate(c);
        } catch (const std::exception& e) {
            try {
                throw Error("candidate " + std::to_string(c) + ": " + e.what());
            } catch (...) {
                errors[c] = std::current_exception();
            }
        }
    };
    if (workers == 1) {
        for (std::size_t c = 0; c < candidates; ++c) guarded(c);
    } else {
        std::vector<std::thread> pool;
        for (unsigned w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                for (std::size_t c = w; c < candidates; c += workers) guarded(c);
            });
        }
        for (auto& t : pool) t.join();
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }

    PosteriorSeries series;
    series.grid = grid;
    for (std::size_t k = 0; k < checkpoints.size(); ++k) {
        PosteriorSnapshot snap;
        snap.time = checkpoints[k].first;
        snap.log_likelihood.resize(candidates);
        for (std::size_t c = 0; c < candidates; ++c) snap.log_likelihood[c] = log_weights[c][k];
        snap.values = normalize_log_weights(snap.log_likelihood);
        series.snapshots.push_back(std::move(snap));
    }
    return series;
}

Marginals marginals(const std::vector<double>& posterior, const std::array<std::size_t, 3>& sizes) {
    if (posterior.size() != sizes[0] * sizes[1] * sizes[2]) {
        throw ShapeError("posterior size does not match the grid");
    }
    Marginals m;
    for (std::size_t p = 0; p < 3; ++p) m.single[p].assign(sizes[p], 0.0);
    m.pairs[0].assign(sizes[0] * sizes[1], 0.0);
    m.pairs[1].assign(sizes[0] * sizes[2], 0.0);
    m.pairs[2].assign(sizes[1] * sizes[2], 0.0);
    for (std::size_t i = 0; i < sizes[0]; ++i) {
        for (std::size_t j = 0; j < sizes[1]; ++j) {
            for (std::size_t k = 0; k < sizes[2]; ++k) {
                const double v = posterior[(i * sizes[1] + j) * sizes[2] + k];
                m.single[0][i] += v;
                m.single[1][j] += v;
                m.single[2][k] += v;
                m.pairs[0][i * sizes[1] + j] += v;
                m.pairs[1][i * sizes[2] + k] += v;
                m.pairs[2][j * sizes[2] + k] += v;
            }
        }
    }
    return m;
}

MapEstimate map_estimate(const std::vector<double>& posterior, const ParamGrid& grid) {
    const auto sizes = grid.sizes();
    if (posterior.size() != grid.class_count() || posterior.empty()) {
        throw ShapeError("posterior size does not match the grid");
    }
    const auto best = static_cast<std::size_t>(std::max_element(posterior.begin(), posterior.end()) - posterior.begin());
    MapEstimate out;
    out.indices = {static_cast<std::uint8_t>(best / (sizes[1] * sizes[2])),
                   static_cast<std::uint8_t>((best / sizes[2]) % sizes[1]), static_cast<std::uint8_t>(best % sizes[2])};
    out.params = grid.params_at(out.indices);
    out.probability = posterior[best];
    return out;
}

}  // namespace qpcnet::bayes
