#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <moelab/losses.hpp>
#include <moelab/moe.hpp>

namespace moelab {

// Structured verdict of one bound check: holds == (lhs <= rhs + 1e-9).
// Checks whose premises fail report lhs = rhs = 0 with
// context["applicable"] = "false" and a reason, never a spurious failure.
struct BoundReport {
    std::string name;
    double lhs = 0.0;
    double rhs = 0.0;
    bool holds = false;
    double slack = 0.0; // rhs - lhs
    std::map<std::string, std::string> context;

    static constexpr double kTol = 1e-9;
};

BoundReport make_report(std::string name, double lhs, double rhs,
                        std::map<std::string, std::string> context = {});
BoundReport vacuous_report(std::string name, const std::string &reason,
                           std::map<std::string, std::string> context = {});
bool report_applicable(const BoundReport &r);

// Ground-truth token-to-region map backing the latent-allocation checks.
// Region ids are 0-based; the region partition covers every token exactly
// once.
struct LatentAllocation {
    std::vector<std::uint32_t> assign; // token id -> region id
    std::size_t regions = 0;
};

// ----- small combinatorial kernels -----

// Minimum-cost assignment on a square matrix, O(n^3), deterministic.
// Returns row -> column.
std::vector<std::size_t> hungarian_min(const std::vector<std::vector<double>> &cost);

struct KappaResult {
    double kappa = 0.0;
    std::vector<std::size_t> perm; // layer-l expert -> layer-(l+1) expert
};

// Permutation-invariant cross-layer coupling coefficient: the best
// relabeling agreement between adjacent-layer top-1 assignments.
KappaResult coupling_coefficient(const std::vector<std::uint32_t> &c_l,
                                 const std::vector<std::uint32_t> &c_l1, std::size_t experts);

// Exhaustive reference for small E; gated to E <= 6.
KappaResult coupling_coefficient_bruteforce(const std::vector<std::uint32_t> &c_l,
                                            const std::vector<std::uint32_t> &c_l1, std::size_t experts);

// Balanced k-means labels: deterministic farthest-point seeding from the
// seed, at most 100 Lloyd iterations, then a distance-greedy balancing pass
// that moves the farthest members of oversized clusters to the nearest
// cluster with room.
std::vector<std::size_t> kmeans_balanced(const Tensor &points, std::size_t clusters, std::uint64_t seed);

// Agreement (percent) between balanced k-means clusterings of two layers'
// token representations, aligned with the Hungarian algorithm. Both
// clusterings use the same seed.
double cluster_agreement(const Tensor &reps_l, const Tensor &reps_l1, std::size_t clusters,
                         std::uint64_t seed);

// ----- validators -----

// Gradient/activation alignment on a single token: for every co-activated
// pair, |cos(grad W_down_e, grad W_down_v) − cos(z_e, z_v)| must stay below
// 1e-8. Gradients come from an actual backward pass of the full objective
// restricted to that token.
BoundReport check_gradient_alignment(MoeModel &model, std::uint32_t token,
                                           const LossWeights &weights);

// Specialization propagation across adjacent layers under the three
// premises (representation continuity δ, source-layer specialization ε,
// coupling confidence ι), with the explicit constant
// ε + 2√2(δ+2ι) + 2(δ+2ι)². Premises are verified before the bound is
// asserted; top-1 activation is used throughout.
BoundReport check_specialization_propagation(const Tensor &routers_l, const Tensor &routers_l1,
                                    const Tensor &tokens_l, const Tensor &tokens_l1, double delta,
                                    double epsilon, double iota);

double router_entropy(std::span<const double> scores); // natural log
double entropy_bound(double delta, std::size_t experts); // h(δ) + δ·ln(E−1), δ ∈ (0, 1/2]

// Decisive-routing entropy corollary on sampled score vectors whose top
// entry is at least 1−δ: every sample must satisfy H ≤ entropy_bound.
BoundReport check_entropy_corollary(double delta, std::size_t experts, std::size_t samples,
                                    std::uint64_t seed);

// Weak specialization ⇒ decisive routing. Verifies the router-gradient
// formula g_e(ℓ_e − L) against a backward pass with the per-expert losses
// held constant, the sign claim on the best expert, and the
// high-probability sharpness bound on the empirical population.
BoundReport check_sharp_routing(const Tensor &expert_losses, const Tensor &router_logits,
                                double gamma0, double eps0, double delta);

// Clear routing improves region-conditional risk. Inputs are the routing
// weights of one expert over an empirical population, the advantage-region
// membership, and before/after per-token losses.
BoundReport check_region_risk(const std::vector<double> &routing_weights,
                                  const std::vector<bool> &in_region,
                                  const std::vector<double> &losses_old,
                                  const std::vector<double> &losses_new, double eta, double loss_bound);

// Backward transfer: P[π*(C_l) ≠ A] ≤ ε_{l+1} + (1 − κ).
BoundReport check_backward_transfer(const std::vector<std::uint32_t> &c_l,
                                    const std::vector<std::uint32_t> &c_l1,
                                    const LatentAllocation &allocation);

struct BalancedPartition {
    std::vector<double> thresholds;  // E−1 cut points in projected coordinates
    std::vector<std::size_t> assign; // token -> slab (0-based)
};

// Equal-size slab partition along a projection direction: sorts u_i = aᵀx_i
// (ties toward the lower token index), cuts into E consecutive blocks of
// B/E, and places thresholds between blocks.
BalancedPartition balanced_partition(const Tensor &tokens, const Tensor &direction, std::size_t experts);

// Modular-shift routing construction: zero scores outside the designated
// slots, per-slot weights from eta. Every expert receives exactly B·k/E
// assignments per layer and the coupling loss attains −(L−1) per token.
// eta is either one row of k weights (shared by all layers) or L rows; each
// row must sum to 1.
std::vector<Tensor> construct_coupled_balanced(std::size_t batch, std::size_t experts, std::size_t top_k,
                                               std::size_t layers, const Tensor &eta);

// ----- self-generating randomized suites (used by the check CLI and tests) -----

std::vector<std::string> suite_names();
std::vector<BoundReport> run_suite(const std::string &name, std::uint64_t seed);

} // namespace moelab
