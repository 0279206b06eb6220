#pragma once

#include <vector>

#include <moelab/trace.hpp>

namespace moelab {

// Adjacent-layer co-activation counts estimated from a held-out trace:
// counts[l][e][v] tallies tokens whose top-1 expert is e at layer l and v at
// layer l+1.
struct CoActivationGraph {
    std::size_t layers = 0;
    std::size_t experts = 0;
    std::vector<std::vector<std::vector<std::size_t>>> counts; // (L-1)×E×E

    std::size_t weight(std::size_t layer, std::size_t e, std::size_t v) const
    {
        return counts[layer][e][v];
    }
};

CoActivationGraph build_graph(const RoutingTrace &trace);

struct Placement {
    std::size_t shards = 0;
    std::size_t capacity = 0; // experts per shard per layer
    std::vector<std::vector<std::size_t>> assign; // [layer][expert] -> shard

    std::size_t shard_of(std::size_t layer, std::size_t expert) const
    {
        return assign[layer][expert];
    }
};

// Greedy heaviest-edge agglomeration under per-layer capacity: edges are
// processed by descending co-activation count (ties toward lower indices),
// merged groups never exceed E/shards experts on any layer, and leftover
// singletons fall back to their round-robin shard. A zero-weight graph
// therefore reproduces the round-robin layout exactly.
Placement partition(const CoActivationGraph &graph, std::size_t shards);

Placement round_robin_placement(std::size_t layers, std::size_t experts, std::size_t shards);

// Co-activation mass kept on-shard; the objective the greedy pass maximizes.
std::size_t coupled_mass(const CoActivationGraph &graph, const Placement &placement);

struct CostReport {
    double local_fraction = 0.0;
    std::size_t remote_dispatches = 0;
    // Estimated step-time inflation 1/(1 − c·remote_fraction) relative to an
    // all-local dispatch; compare across placements (lower is better).
    double est_throughput_ratio = 1.0;
};

// Buckets each sequence by the shard owning its first-layer top-1 experts
// (majority over the sequence, ties toward the lower shard id), then counts
// a (token, layer) top-1 dispatch as local iff its expert lives on the
// bucket's shard. seq_len is the number of trace positions per sequence; 0
// treats each trace step as a single sequence.
CostReport bucket_and_score(const RoutingTrace &trace, const Placement &placement,
                            std::size_t seq_len = 0, double remote_penalty = 0.1);

} // namespace moelab
