#pragma once

#include <optional>
#include <string>
#include <vector>

#include <moelab/losses.hpp>
#include <moelab/synth.hpp>
#include <moelab/trace.hpp>

namespace moelab {

struct TrainConfig {
    std::size_t steps = 2000;
    std::size_t batch_tokens = 120; // training positions per step
    double lr = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.1;
    double warmup_frac = 0.05; // linear warmup, then constant lr
    LossWeights weights;
    std::size_t eval_every = 50;
    std::size_t checkpoint_every = 500;
    std::size_t eval_seqs = 64; // fixed evaluation subset (first sequences of the corpus)
    std::uint64_t seed = 1;

    void validate() const;
};

struct MetricsRow {
    std::size_t step = 0;
    double task = 0, lb = 0, z = 0, sp = 0, cp = 0; // unweighted loss components
    double entropy = 0;    // mean routing entropy over (token, layer)
    double overlap = 0;    // mean |cos| of co-activated activations; NaN when top_k = 1
    double kappa = 0;      // mean top-1 coupling coefficient over adjacent layer pairs
    double load_ratio = 0; // mean over layers of max/min expert load on the eval batch
};

// Decoupled-weight-decay Adam with per-parameter moment state.
class AdamW {
public:
    AdamW(double beta1, double beta2, double weight_decay, double eps = 1e-8);
    void step(const std::vector<Parameter *> &params, double lr);

private:
    double beta1_, beta2_, weight_decay_, eps_;
    std::size_t t_ = 0;
    std::vector<Tensor> m_, v_;
};

struct TrainResult {
    std::vector<MetricsRow> metrics;
    std::vector<std::size_t> checkpoint_steps;
    std::vector<RoutingTrace> checkpoint_traces; // eval-batch trace at each checkpoint
    LossBreakdown final_loss;
};

// Deterministic training loop. When out_dir is non-empty, writes
// metrics.csv, checkpoint_<step>.bin and trace_<step>.trace under it;
// artifacts are byte-identical across reruns with the same config and seed.
TrainResult train(MoeModel &model, const Corpus &corpus, const TrainConfig &cfg,
                  const std::string &out_dir = "", const std::string &config_echo = "");

// Fraction of (step, token, layer) entries whose top-1 expert agrees between
// two traces recorded over the same token set and config.
double stability_fraction(const RoutingTrace &a, const RoutingTrace &b);

// Mean |cos| over co-activated activation pairs; absent with top-1 routing.
std::optional<double> expert_overlap_metric(const std::vector<LayerOutput> &layer_outputs);

// Entry (e, v) is P[top-1 at layer l+1 = v | top-1 at layer l = e]; rows
// without support stay zero.
Tensor conditional_activation_matrix(const RoutingTrace &trace, std::size_t layer);

std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRow &row);

void write_checkpoint(const MoeModel &model, const std::string &path, const std::string &config_echo);
// Loads parameters into a model built with a matching config; returns the
// stored config echo.
std::string read_checkpoint(MoeModel &model, const std::string &path);

} // namespace moelab
