#pragma once

#include <optional>
#include <vector>

#include <moelab/graph.hpp>
#include <moelab/rng.hpp>
#include <moelab/trace.hpp>

namespace moelab {

struct MoeConfig {
    std::size_t experts = 8; // E
    std::size_t top_k = 2;   // k
    std::size_t layers = 2;  // L
    std::size_t hidden = 16; // h
    std::size_t ffn = 32;    // expert intermediate width
    std::size_t vocab = 64;  // V
    bool shared_expert = false;
    bool aux_loss_free = false;
    double bias_step = 1e-3; // update step for the balancing coefficient b

    void validate() const;
};

struct ExpertParams {
    Parameter w_gate; // ffn×hidden
    Parameter w_up;   // ffn×hidden
    Parameter w_down; // hidden×ffn
};

struct MoeLayer {
    Parameter routers; // E×hidden, one routing vector per expert
    std::vector<ExpertParams> experts;
    std::optional<ExpertParams> shared;
    // Selection-only balancing bias, one per expert. Excluded from gradient
    // updates; changes only through update_balancing_bias and is kept
    // centered at mean zero.
    std::vector<double> bias;
};

struct MoeModel {
    MoeConfig cfg;
    Parameter embedding; // V×hidden
    std::vector<MoeLayer> layers;
    Parameter head; // V×hidden, logits = x·headᵀ

    static MoeModel init(const MoeConfig &cfg, Rng &rng);
    std::vector<Parameter *> parameters(); // deterministic order
    std::vector<const Parameter *> parameters() const;
    void zero_grads();
};

struct RouteResult {
    Var logits; // B×E router logits q = x·rᵀ
    Var scores; // B×E bias-free softmax of q; combination weights come from here
    // Ranked top-k per token, selected on q (+ bias when aux_loss_free).
    // Ties break toward the lowest expert index.
    std::vector<std::vector<std::size_t>> active;
};

struct ExpertOut {
    Var z; // ffn, intermediate activation (retained for the specialization loss)
    Var y; // hidden
};

// Expert computation runs batched per expert: the tokens routed to expert e
// are gathered (in ascending token order) into one matrix, so expert_z[e] is
// the [n_e × ffn] intermediate-activation block and slot_pos maps each
// (token, slot) back to its row. z_activation() exposes the per-token,
// per-active-expert view the diagnostics and losses consume.
struct LayerOutput {
    Var logits;                                   // B×E
    Var scores;                                   // B×E
    std::vector<std::vector<std::size_t>> active; // per token, ranked
    std::vector<Var> expert_z;                    // per expert, invalid when unused
    std::vector<std::vector<std::size_t>> expert_rows; // per expert: assigned tokens, ascending
    std::vector<std::vector<std::size_t>> slot_pos;    // [token][slot] -> row in expert_z
    Var y; // B×hidden combined expert output, pre-residual

    std::span<const double> z_activation(std::size_t token, std::size_t slot) const
    {
        return expert_z[active[token][slot]].value().row(slot_pos[token][slot]);
    }
};

struct ForwardResult {
    Var logits; // B×V language-model logits
    std::vector<LayerOutput> layer_outputs;
    RoutingTrace trace; // single-step trace of this forward pass
};

RouteResult route(Graph &g, MoeLayer &layer, Var x, const MoeConfig &cfg);
ExpertOut expert_forward(Graph &g, ExpertParams &expert, Var x_row);
LayerOutput layer_forward(Graph &g, MoeLayer &layer, Var x, const MoeConfig &cfg);
// Embedding → L residual MoE layers → linear head. The residual connection
// is applied here, on top of each layer's combined output.
ForwardResult model_forward(Graph &g, MoeModel &model, const std::vector<std::uint32_t> &tokens);

// b_e += bias_step · sign(mean_load − load_e), then re-centered to mean 0.
void update_balancing_bias(MoeLayer &layer, const std::vector<std::size_t> &loads, const MoeConfig &cfg);

} // namespace moelab
