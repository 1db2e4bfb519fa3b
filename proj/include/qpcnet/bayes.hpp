#pragma once

// Likelihood filter over a grid of candidate (omega, gamma_up, gamma_down).
//
// For each candidate the unconditioned state is propagated with the Lindblad
// generator of the dot model and weighted bin by bin with the Gaussian
// likelihood of the observed current. Jumps only move population between the
// empty and occupied sectors and the detector resolves the sectors, so no
// empty/occupied coherence ever builds up: the state is p_empty plus a 2x2
// density matrix over {down, up}.

#include <array>
#include <cstddef>
#include <vector>

#include "qpcnet/dataset.hpp"
#include "qpcnet/sim.hpp"

namespace qpcnet::bayes {

using dataset::LabelIndices;
using dataset::ParamGrid;

struct FilterState {
    double p_empty = 1.0;
    double rho_dd = 0.0;  // <down|rho|down>
    double rho_uu = 0.0;  // <up|rho|up>
    double coh_re = 0.0;  // Re <down|rho|up>
    double coh_im = 0.0;  // Im <down|rho|up>
    double log_weight = 0.0;

    double trace() const { return p_empty + rho_dd + rho_uu; }
    /// Eigenvalues of the occupied-sector block, ascending.
    std::array<double, 2> occupied_eigenvalues() const;
};

/// Linear generator acting on (p_empty, rho_dd, rho_uu, coh_re, coh_im), row-major 5x5.
using Generator = std::array<double, 25>;

Generator generator(const sim::TrajectoryParams& params);

/// One classical RK4 step of length dt_sub (us).
FilterState lindblad_step(const FilterState& state, const sim::TrajectoryParams& params, double dt_sub);

struct Levels {
    double empty = sim::kEmptyLevel;
    double occupied = sim::kOccupiedLevel;
};

/// Weights the empty sector by N(y; empty, sigma) and the occupied sector by
/// N(y; occupied, sigma), adds the log of the total to log_weight and
/// renormalises. `bin` is only used in error messages.
FilterState measurement_update(const FilterState& state, double y, double sigma, Levels levels = {},
                               std::size_t bin = 0);

struct FilterOptions {
    double sigma_bin = 0.25;
    std::vector<double> checkpoints{1.0, 10.0, 100.0, 500.0};  // us
    std::size_t substeps = 4;
    Levels levels;
    unsigned workers = 1;
};

/// Posterior over the grid, flattened with omega slowest: (i * S1 + j) * S2 + k.
struct PosteriorSnapshot {
    double time = 0.0;  // us
    std::vector<double> values;
    std::vector<double> log_likelihood;
};

struct PosteriorSeries {
    ParamGrid grid;
    std::vector<PosteriorSnapshot> snapshots;
};

/// Runs one filter per candidate over a Markovian trace and records the
/// normalised posterior (uniform prior) at every checkpoint inside the trace.
/// Non-Markovian traces are rejected with UnsupportedMode.
PosteriorSeries run_filter(const sim::CurrentTrace& trace, const ParamGrid& grid, const FilterOptions& options = {});

/// exp-normalise a vector of log-likelihoods.
std::vector<double> normalize_log_weights(const std::vector<double>& log_weights);

struct Marginals {
    std::array<std::vector<double>, 3> single;
    /// (omega, gamma_up), (omega, gamma_down), (gamma_up, gamma_down), row-major.
    std::array<std::vector<double>, 3> pairs;
};

Marginals marginals(const std::vector<double>& posterior, const std::array<std::size_t, 3>& sizes);

struct MapEstimate {
    LabelIndices indices{};
    sim::TrajectoryParams params;
    double probability = 0.0;
};

/// Most probable candidate; ties go to the lowest flattened index.
MapEstimate map_estimate(const std::vector<double>& posterior, const ParamGrid& grid);

}  // namespace qpcnet::bayes
