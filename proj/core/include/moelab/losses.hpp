#pragma once

#include <vector>

#include <moelab/moe.hpp>

namespace moelab {

struct LossWeights {
    double lambda_lb = 1e-2;
    double lambda_z = 1e-3;
    double lambda_sp = 2e-3;
    double lambda_cp = 1e-3;

    void validate() const
    {
        require(lambda_lb >= 0 && lambda_z >= 0 && lambda_sp >= 0 && lambda_cp >= 0,
                "loss weights must be non-negative");
    }
};

struct LossBreakdown {
    double task = 0, lb = 0, z = 0, sp = 0, cp = 0; // unweighted components
    double total = 0;
    bool cp_defined = true; // false when the model has fewer than two layers
};

struct LossBundle {
    Var total;
    Var task, lb, z, sp, cp; // unweighted component nodes, for logging
    LossBreakdown values;
};

// Mean over tokens of Σ_layers Σ_{unordered co-activated pairs} cos²(z_e, z_ν).
// Pairs are counted once; with top-1 routing there are no pairs and the loss
// is identically zero.
Var specialization_loss(Graph &g, const std::vector<LayerOutput> &layer_outputs);

struct CouplingLoss {
    Var value;
    bool defined = true; // false (value 0) when fewer than two layers
};

// Mean over tokens of −Σ_{adjacent layers} Σ_e Σ_{ν∈T} s_l[e]·s_{l+1}[ν],
// where T holds the k next-layer experts with the highest joint probability
// with e (ties toward the lowest index). Gradients flow into both layers'
// scores; the T selection itself is treated as piecewise constant.
CouplingLoss coupling_loss(Graph &g, const std::vector<Var> &layer_scores, std::size_t top_k);
CouplingLoss coupling_loss(Graph &g, const std::vector<LayerOutput> &layer_outputs, std::size_t top_k);

// Value-only evaluation on raw score matrices (one B×E tensor per layer).
double coupling_loss_value(const std::vector<Tensor> &layer_scores, std::size_t top_k);

// Switch-style balance loss for one layer: E · Σ_e f_e·P_e with f_e the
// fraction of (token, slot) assignments to expert e and P_e the mean routing
// score of e. Uniform scores and loads give exactly 1.
Var load_balance_loss(Graph &g, Var scores, const std::vector<std::vector<std::size_t>> &active);

// Mean over tokens and layers of (log Σ_j exp q_j)².
Var z_loss(Graph &g, const std::vector<Var> &logits_per_layer);

// Full objective: task cross-entropy plus weighted components, composed in a
// fixed reduction order (task, lb, z, sp, cp). Components are always
// evaluated and reported unweighted, even at zero weight.
LossBundle total_loss(Graph &g, Var logits, const std::vector<std::uint32_t> &targets,
                      const std::vector<LayerOutput> &layer_outputs, const LossWeights &weights,
                      std::size_t top_k);

} // namespace moelab
