#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "iwd/diffcore.hpp"
#include "iwd/errors.hpp"
#include "iwd/patchdist.hpp"
#include "iwd/rng.hpp"

namespace iwd::transport {

using patchdist::Image;
using patchdist::PatchDistribution;
using patchdist::PatchGrid;

// Dense nonnegative N x M cost matrix, entry (i,j) = ||u_i - v_j||_1.
struct CostMatrix {
    int n = 0;
    int m = 0;
    std::vector<double> values;

    double& at(int i, int j) { return values[static_cast<std::size_t>(i) * m + j]; }
    double at(int i, int j) const { return values[static_cast<std::size_t>(i) * m + j]; }
    double max() const;
};

CostMatrix ground_cost(const PatchDistribution& p, const PatchDistribution& q);

// Coupling with prescribed marginals a (rows) and b (columns).
struct TransportPlan {
    int n = 0;
    int m = 0;
    std::vector<double> coupling;
    std::vector<double> source_weights;
    std::vector<double> target_weights;

    double& at(int i, int j) { return coupling[static_cast<std::size_t>(i) * m + j]; }
    double at(int i, int j) const { return coupling[static_cast<std::size_t>(i) * m + j]; }
    double cost_against(const CostMatrix& c) const;
    // max L1 deviation of row/column sums from the prescribed marginals
    double marginal_error() const;
};

enum class SolverKind { exact, sinkhorn, dual, brute };

const char* solver_name(SolverKind k);

struct IwdValue {
    double value = 0.0;
    SolverKind solver = SolverKind::exact;
    int n = 0;
    int m = 0;
    double marginal_error = 0.0;
    int iterations = 0;
    std::optional<TransportPlan> plan;
};

// JSON report {solver, value, n, m, marginal_error, iterations}
std::string to_json(const IwdValue& v);

std::vector<double> uniform_weights(int n);

// Exact 1-Wasserstein. Uniform equal-size marginals solve as a minimum-cost
// perfect assignment (O(N^3) Kuhn-Munkres, ties in the alternating-path scan
// resolve to the lowest column index); general weights go through
// successive-shortest-path min-cost flow on the bipartite graph.
IwdValue exact_w1(const CostMatrix& cost, std::span<const double> a, std::span<const double> b);

// Ground-truth oracle: enumerates all N! assignments. Square uniform only.
IwdValue brute_force_w1(const CostMatrix& cost);

struct SinkhornConfig {
    double epsilon = 0.0; // absolute regularization; <= 0 means 0.05 * max cost
    int max_iterations = 10000;
    double tolerance = 1e-6; // marginal L1 error
    bool log_domain = true;

    void validate() const;
    double resolve_epsilon(const CostMatrix& cost) const;
};

// Entropic OT; the returned value is the transport cost of the plan after
// rounding to exact feasibility, so it can never undercut the exact optimum
// beyond float error. Throws ConvergenceError when the marginal tolerance is
// not reached within max_iterations.
IwdValue sinkhorn_w1(const CostMatrix& cost, std::span<const double> a, std::span<const double> b,
                     const SinkhornConfig& cfg);

// Differentiable fixed-iteration Sinkhorn: value <P_T, C> of the unrounded
// plan after exactly `iterations` alternating updates, plus its exact
// reverse-mode gradient w.r.t. the cost matrix (epsilon held constant).
struct UnrolledSinkhorn {
    double value = 0.0;
    std::vector<double> cost_grad;
};
UnrolledSinkhorn sinkhorn_unrolled_grad(const CostMatrix& cost, std::span<const double> a,
                                        std::span<const double> b, double epsilon,
                                        int iterations);

// Critic for the Kantorovich-Rubinstein dual: scalar net on patches.
struct CriticState {
    diffcore::NetworkSpec spec;
    diffcore::Parameters params;
    double penalty_weight = 10.0;
    int inner_steps = 5;

    void validate() const;
};

CriticState make_critic(int atom_dim, std::uint64_t seed, double penalty_weight = 10.0,
                        int inner_steps = 5);

// Mean over aligned atoms of (||grad f(rho_i u_i + (1-rho_i) v_i)||_2 - 1)^2.
double gradient_penalty(const CriticState& critic, const PatchDistribution& real,
                        const PatchDistribution& fake, std::span<const double> rhos);

// One real/fake distribution pair the critic is trained against.
struct CriticPair {
    const PatchDistribution* real = nullptr;
    const PatchDistribution* fake = nullptr;
};

// Objective pieces and the ascent gradient of
//   E[f(u)] - E[f(v)] - lambda * R_gp   (averaged over the pairs)
// with interpolation weights drawn from the provided generator.
struct CriticObjective {
    double difference = 0.0;
    double penalty = 0.0;
    std::vector<double> ascent_grad;
};
CriticObjective critic_objective_grad(const CriticState& critic,
                                      std::span<const CriticPair> pairs, rng::Rng& gen);

struct DualOptions {
    double lambda = 10.0;
    int steps = 500;
    diffcore::OptimizerConfig optimizer{diffcore::OptimizerKind::adam, 5e-4, 0.5, 0.999, 1e-8};
    std::uint64_t seed = 0;
};

// Trains the critic by gradient-penalty ascent and returns the final
// difference-of-means objective (the penalty term excluded).
double dual_estimate(CriticState& critic, const PatchDistribution& mu,
                     const PatchDistribution& nu, const DualOptions& opts);

double critic_dual_estimate(const Image& x, const Image& xt, const PatchGrid& grid,
                            CriticState& critic, const DualOptions& opts);

struct IwdOptions {
    SolverKind solver = SolverKind::exact;
    SinkhornConfig sinkhorn{};
    DualOptions dual{};
};

// Internal Wasserstein distance between two images on a fixed grid.
IwdValue iwd(const Image& x, const Image& xt, const PatchGrid& grid,
             const IwdOptions& opts = {});

// Weighted sum of per-kernel IWD values (non-overlapping grids).
double multiscale_iwd(const Image& x, const Image& xt, std::span<const int> kernels,
                      std::span<const double> weights, const IwdOptions& opts = {});

// Pixel-mass 1-Wasserstein baseline: each grayscale image is a distribution
// over pixel coordinates (intensity normalized to unit mass), ground cost is
// the L1 grid distance in pixel units.
double global_pixel_w1(const Image& x, const Image& xt);

} // namespace iwd::transport
