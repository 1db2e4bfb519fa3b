#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "qpcnet/bayes.hpp"
#include "qpcnet/error.hpp"

using namespace qpcnet;
using namespace qpcnet::bayes;

namespace {

FilterState from_rho(const Eigen::Matrix3cd& rho) {
    FilterState s;
    s.p_empty = rho(0, 0).real();
    s.rho_dd = rho(1, 1).real();
    s.rho_uu = rho(2, 2).real();
    s.coh_re = rho(1, 2).real();
    s.coh_im = rho(1, 2).imag();
    return s;
}

// Log-likelihood of a trace under one candidate: exact matrix-exponential
// propagation of the full three-level state, then a Gaussian weight on the
// empty and occupied sectors.
double oracle_log_likelihood(const std::vector<float>& y, double dt, const sim::TrajectoryParams& p, double sigma) {
    const Eigen::MatrixXcd step = (oracle::liouvillian(p.omega, p.gamma_up, p.gamma_down) * dt).exp();
    Eigen::VectorXcd v = Eigen::VectorXcd::Zero(9);
    v(0) = 1.0;  // rho = |empty><empty|
    double total = 0;
    for (float obs : y) {
        v = step * v;
        const double le = std::exp(-(obs - 1.0) * (obs - 1.0) / (2 * sigma * sigma)) / (sigma * std::sqrt(2 * std::numbers::pi));
        const double lo = std::exp(-(obs - 0.0) * (obs - 0.0) / (2 * sigma * sigma)) / (sigma * std::sqrt(2 * std::numbers::pi));
        // column-stacked: index 3*j + i holds rho(i, j)
        for (int j = 0; j < 3; ++j)
            for (int i = 0; i < 3; ++i) {
                const bool empty_block = i == 0 && j == 0;
                const bool occupied_block = i > 0 && j > 0;
                v(3 * j + i) *= empty_block ? le : occupied_block ? lo : 0.0;
            }
        const double norm = v(0).real() + v(4).real() + v(8).real();
        total += std::log(norm);
        v /= norm;
    }
    return total;
}

sim::CurrentTrace trace_at(const sim::TrajectoryParams& p, double duration, std::uint64_t seed) {
    return sim::synthesize(p, duration, sim::Mode::Markovian, {}, seed);
}

}  // namespace

TEST(Bayes, GeneratorPreservesTrace) {
    const Generator g = generator({5.2, 3.0, 2.0});
    for (std::size_t col = 0; col < 5; ++col) EXPECT_EQ(g[0 * 5 + col] + g[1 * 5 + col] + g[2 * 5 + col], 0.0);
}

TEST(Bayes, PropagationMatchesLiouvillian) {
    const sim::TrajectoryParams p{7.6, 4.0, 2.0};
    Eigen::Matrix3cd rho0 = Eigen::Matrix3cd::Zero();
    rho0(0, 0) = 0.3;
    rho0(1, 1) = 0.5;
    rho0(2, 2) = 0.2;
    rho0(1, 2) = std::complex<double>(0.1, -0.2);
    rho0(2, 1) = std::conj(rho0(1, 2));
    FilterState s = from_rho(rho0);
    const double h = 0.0025;
    for (int i = 1; i <= 800; ++i) {
        s = lindblad_step(s, p, h);
        if (i % 200 == 0) {
            const FilterState want = from_rho(oracle::propagate(rho0, p.omega, p.gamma_up, p.gamma_down, i * h));
            EXPECT_NEAR(s.p_empty, want.p_empty, 1e-9);
            EXPECT_NEAR(s.rho_dd, want.rho_dd, 1e-9);
            EXPECT_NEAR(s.rho_uu, want.rho_uu, 1e-9);
            EXPECT_NEAR(s.coh_re, want.coh_re, 1e-9);
            EXPECT_NEAR(s.coh_im, want.coh_im, 1e-9);
            EXPECT_NEAR(s.trace(), 1.0, 1e-12);
            EXPECT_GE(s.occupied_eigenvalues()[0], -1e-12);
        }
    }
}

TEST(Bayes, MeasurementUpdateOneBin) {
    FilterState s;
    s.p_empty = 0.7;
    s.rho_dd = 0.2;
    s.rho_uu = 0.1;
    s.coh_re = 0.05;
    s.coh_im = -0.02;
    const double y = 0.3, sigma = 0.25;
    const FilterState out = measurement_update(s, y, sigma);
    const long double two_s2 = 2.0L * sigma * sigma;
    const long double norm = 1.0L / (static_cast<long double>(sigma) * std::sqrt(2.0L * std::numbers::pi_v<long double>));
    const long double le = norm * std::exp(-(y - 1.0L) * (y - 1.0L) / two_s2);
    const long double lo = norm * std::exp(-(y - 0.0L) * (y - 0.0L) / two_s2);
    const long double total = 0.7L * le + 0.3L * lo;
    EXPECT_NEAR(out.p_empty, static_cast<double>(0.7L * le / total), 1e-14);
    EXPECT_NEAR(out.rho_dd, static_cast<double>(0.2L * lo / total), 1e-14);
    EXPECT_NEAR(out.coh_im, static_cast<double>(-0.02L * lo / total), 1e-14);
    EXPECT_NEAR(out.trace(), 1.0, 1e-15);
    EXPECT_NEAR(out.log_weight, static_cast<double>(std::log(total)), 1e-12);
}

TEST(Bayes, UnderflowIsReported) {
    FilterState s;  // certainly empty
    try {
        measurement_update(s, -50.0, 0.01, {}, 17);
        ADD_FAILURE() << "expected underflow";
    } catch (const UnderflowError& e) {
        EXPECT_EQ(e.bin(), 17u);
    }
}

TEST(Bayes, LogLikelihoodMatchesExactOracle) {
    const auto trace = trace_at({5.2, 3.0, 3.0}, 10.0, 4);
    ParamGrid grid;
    grid.omega_values = {5.2, 8.8};
    grid.gamma_up_values = {3.0};
    grid.gamma_down_values = {1.0, 3.0};
    FilterOptions opt;
    opt.checkpoints = {10.0};
    const PosteriorSeries s = run_filter(trace, grid, opt);
    ASSERT_EQ(s.snapshots.size(), 1u);
    for (std::size_t c = 0; c < 4; ++c) {
        const LabelIndices idx{static_cast<std::uint8_t>(c / 2), 0, static_cast<std::uint8_t>(c % 2)};
        const double want = oracle_log_likelihood(trace.samples, trace.dt, grid.params_at(idx), 0.25);
        EXPECT_NEAR(s.snapshots[0].log_likelihood[c], want, 1e-6 * std::abs(want) + 1e-6) << c;
    }
}

TEST(Bayes, TwoHypothesisPosterior) {
    // Posterior odds of two candidates equal their likelihood ratio under a
    // uniform prior.
    const auto trace = trace_at({4.0, 2.0, 5.0}, 20.0, 9);
    ParamGrid grid;
    grid.omega_values = {4.0};
    grid.gamma_up_values = {2.0};
    grid.gamma_down_values = {1.0, 5.0};
    FilterOptions opt;
    opt.checkpoints = {20.0};
    const auto snap = run_filter(trace, grid, opt).snapshots.at(0);
    const double l1 = oracle_log_likelihood(trace.samples, trace.dt, {4.0, 2.0, 1.0}, 0.25);
    const double l5 = oracle_log_likelihood(trace.samples, trace.dt, {4.0, 2.0, 5.0}, 0.25);
    EXPECT_NEAR(snap.values[1], 1.0 / (1.0 + std::exp(l1 - l5)), 1e-6);
    EXPECT_NEAR(snap.values[0] + snap.values[1], 1.0, 1e-12);
}

TEST(Bayes, SingleCandidateAndCheckpoints) {
    const auto trace = trace_at({5.2, 3.0, 3.0}, 20.0, 2);
    ParamGrid one;
    one.omega_values = {5.2};
    one.gamma_up_values = {3.0};
    one.gamma_down_values = {3.0};
    const PosteriorSeries s = run_filter(trace, one);
    // Checkpoints beyond the trace are dropped.
    ASSERT_EQ(s.snapshots.size(), 2u);
    EXPECT_EQ(s.snapshots[0].time, 1.0);
    EXPECT_EQ(s.snapshots[1].time, 10.0);
    for (const auto& snap : s.snapshots) EXPECT_EQ(snap.values, std::vector<double>{1.0});
}

TEST(Bayes, NormalisedAndWorkerInvariant) {
    const auto trace = trace_at({5.2, 3.0, 3.0}, 10.0, 6);
    const ParamGrid grid = ParamGrid::evenly_spaced(3);
    FilterOptions one;
    FilterOptions many;
    many.workers = 4;
    const PosteriorSeries a = run_filter(trace, grid, one);
    const PosteriorSeries b = run_filter(trace, grid, many);
    ASSERT_EQ(a.snapshots.size(), b.snapshots.size());
    for (std::size_t k = 0; k < a.snapshots.size(); ++k) {
        EXPECT_EQ(a.snapshots[k].values, b.snapshots[k].values);
        double sum = 0;
        for (double v : a.snapshots[k].values) {
            EXPECT_GE(v, 0.0);
            sum += v;
        }
        EXPECT_NEAR(sum, 1.0, 1e-9);
    }
}

TEST(Bayes, RejectsFilteredTraces) {
    const auto trace = sim::synthesize({5.2, 3.0, 3.0}, 1.0, sim::Mode::NonMarkovian, {}, 1);
    EXPECT_THROW(run_filter(trace, ParamGrid{}), UnsupportedMode);
}

TEST(Bayes, MarginalsAndMap) {
    const std::array<std::size_t, 3> sizes{2, 3, 2};
    std::vector<double> post(12, 0.0);
    post[(1 * 3 + 2) * 2 + 0] = 0.5;
    post[(0 * 3 + 1) * 2 + 1] = 0.3;
    post[(1 * 3 + 0) * 2 + 1] = 0.2;
    const Marginals m = marginals(post, sizes);
    EXPECT_NEAR(m.single[0][1], 0.7, 1e-15);
    EXPECT_NEAR(m.single[1][2], 0.5, 1e-15);
    EXPECT_NEAR(m.single[2][1], 0.5, 1e-15);
    EXPECT_NEAR(m.pairs[0][1 * 3 + 2], 0.5, 1e-15);
    EXPECT_NEAR(m.pairs[1][0 * 2 + 1], 0.3, 1e-15);
    EXPECT_NEAR(m.pairs[2][0 * 2 + 1], 0.2, 1e-15);

    ParamGrid grid;
    grid.omega_values = {4, 5};
    grid.gamma_up_values = {1, 2, 3};
    grid.gamma_down_values = {1, 2};
    const MapEstimate map = map_estimate(post, grid);
    EXPECT_EQ(map.indices, (LabelIndices{1, 2, 0}));
    EXPECT_EQ(map.params, (sim::TrajectoryParams{5, 3, 1}));

    std::vector<double> tie(12, 0.0);
    tie[3] = tie[7] = 0.5;
    EXPECT_EQ(map_estimate(tie, grid).indices, (LabelIndices{0, 1, 1}));
}

TEST(Bayes, NormalizeLogWeights) {
    const auto p = normalize_log_weights({-1000.0, -1000.0 + std::log(3.0)});
    // log(3) added to -1000 keeps only ~13 significant digits.
    EXPECT_NEAR(p[0], 0.25, 1e-12);
    EXPECT_NEAR(p[1], 0.75, 1e-12);
    EXPECT_NEAR(p[0] + p[1], 1.0, 1e-15);
}
