#include <moelab/placement.hpp>

#include <algorithm>
#include <numeric>

namespace moelab {

CoActivationGraph build_graph(const RoutingTrace &trace)
{
    require(trace.step_count() > 0, "build_graph: empty trace");
    require(trace.layers >= 2, "build_graph: needs at least two layers");

    CoActivationGraph g;
    g.layers = trace.layers;
    g.experts = trace.experts;
    g.counts.assign(trace.layers - 1,
                    std::vector<std::vector<std::size_t>>(trace.experts,
                                                          std::vector<std::size_t>(trace.experts, 0)));
    for (std::size_t s = 0; s < trace.step_count(); s++)
        for (std::size_t l = 0; l + 1 < trace.layers; l++)
            for (std::size_t i = 0; i < trace.batch; i++)
                g.counts[l][trace.top1(s, l, i)][trace.top1(s, l + 1, i)]++;
    return g;
}

Placement round_robin_placement(std::size_t layers, std::size_t experts, std::size_t shards)
{
    require(shards >= 1 && experts % shards == 0, "placement: shards must divide the expert count");
    Placement p;
    p.shards = shards;
    p.capacity = experts / shards;
    p.assign.assign(layers, std::vector<std::size_t>(experts, 0));
    for (std::size_t l = 0; l < layers; l++)
        for (std::size_t e = 0; e < experts; e++)
            p.assign[l][e] = e % shards;
    return p;
}

namespace {

struct Edge {
    std::size_t layer, from, to, weight;
};

struct Groups {
    // group id per node; nodes are (layer, expert) flattened
    std::vector<std::size_t> group_of;
    // per group: member nodes and per-layer expert counts
    std::vector<std::vector<std::size_t>> members;
    std::vector<std::vector<std::size_t>> layer_counts;
};

} // namespace

Placement partition(const CoActivationGraph &graph, std::size_t shards)
{
    const std::size_t layers = graph.layers, experts = graph.experts;
    require(shards >= 1 && experts % shards == 0, "partition: shards must divide the expert count");
    const std::size_t capacity = experts / shards;
    const std::size_t n_nodes = layers * experts;
    auto node_id = [&](std::size_t l, std::size_t e) { return l * experts + e; };

    std::vector<Edge> edges;
    for (std::size_t l = 0; l + 1 < layers; l++)
        for (std::size_t e = 0; e < experts; e++)
            for (std::size_t v = 0; v < experts; v++)
                if (graph.counts[l][e][v] > 0)
                    edges.push_back({ l, e, v, graph.counts[l][e][v] });
    std::sort(edges.begin(), edges.end(), [](const Edge &a, const Edge &b) {
        if (a.weight != b.weight)
            return a.weight > b.weight;
        if (a.layer != b.layer)
            return a.layer < b.layer;
        if (a.from != b.from)
            return a.from < b.from;
        return a.to < b.to;
    });

    Groups g;
    g.group_of.resize(n_nodes);
    g.members.resize(n_nodes);
    g.layer_counts.assign(n_nodes, std::vector<std::size_t>(layers, 0));
    for (std::size_t l = 0; l < layers; l++)
        for (std::size_t e = 0; e < experts; e++) {
            const std::size_t id = node_id(l, e);
            g.group_of[id] = id;
            g.members[id] = { id };
            g.layer_counts[id][l] = 1;
        }

    for (const Edge &edge : edges) {
        const std::size_t ga = g.group_of[node_id(edge.layer, edge.from)];
        const std::size_t gb = g.group_of[node_id(edge.layer + 1, edge.to)];
        if (ga == gb)
            continue;
        bool fits = true;
        for (std::size_t l = 0; l < layers; l++)
            if (g.layer_counts[ga][l] + g.layer_counts[gb][l] > capacity) {
                fits = false;
                break;
            }
        if (!fits)
            continue;
        for (std::size_t m : g.members[gb]) {
            g.group_of[m] = ga;
            g.members[ga].push_back(m);
        }
        for (std::size_t l = 0; l < layers; l++)
            g.layer_counts[ga][l] += g.layer_counts[gb][l];
        g.members[gb].clear();
    }

    // pack groups into shards: big groups first (ties toward the smallest
    // member), singletons fall back to the expert's round-robin shard
    std::vector<std::size_t> group_ids;
    for (std::size_t id = 0; id < n_nodes; id++)
        if (!g.members[id].empty())
            group_ids.push_back(id);
    std::sort(group_ids.begin(), group_ids.end(), [&](std::size_t a, std::size_t b) {
        if (g.members[a].size() != g.members[b].size())
            return g.members[a].size() > g.members[b].size();
        return *std::min_element(g.members[a].begin(), g.members[a].end()) <
               *std::min_element(g.members[b].begin(), g.members[b].end());
    });

    Placement placement;
    placement.shards = shards;
    placement.capacity = capacity;
    placement.assign.assign(layers, std::vector<std::size_t>(experts, 0));
    std::vector<std::vector<std::size_t>> used(shards, std::vector<std::size_t>(layers, 0));

    auto fits_shard = [&](std::size_t shard, std::size_t group) {
        for (std::size_t l = 0; l < layers; l++)
            if (used[shard][l] + g.layer_counts[group][l] > capacity)
                return false;
        return true;
    };
    auto place_group = [&](std::size_t shard, std::size_t group) {
        for (std::size_t m : g.members[group]) {
            const std::size_t l = m / experts, e = m % experts;
            placement.assign[l][e] = shard;
            used[shard][l]++;
        }
    };

    auto place_node = [&](std::size_t node) {
        const std::size_t l = node / experts, e = node % experts;
        const std::size_t preferred = e % shards;
        for (std::size_t offset = 0; offset < shards; offset++) {
            const std::size_t candidate = (preferred + offset) % shards;
            if (used[candidate][l] < capacity) {
                placement.assign[l][e] = candidate;
                used[candidate][l]++;
                return;
            }
        }
        fail("partition: no shard has room left on layer " + std::to_string(l));
    };

    for (std::size_t id : group_ids) {
        std::size_t preferred = 0;
        if (g.members[id].size() == 1)
            preferred = (g.members[id][0] % experts) % shards;
        std::size_t shard = shards;
        for (std::size_t offset = 0; offset < shards; offset++) {
            const std::size_t candidate = (preferred + offset) % shards;
            if (fits_shard(candidate, id)) {
                shard = candidate;
                break;
            }
        }
        if (shard < shards) {
            place_group(shard, id);
            continue;
        }
        // no shard can hold the whole group: fall back to placing its
        // members individually, lowest node id first (always feasible since
        // every layer has exactly shards·capacity slots)
        auto members = g.members[id];
        std::sort(members.begin(), members.end());
        for (std::size_t m : members)
            place_node(m);
    }

    // same-layer swap refinement: hill-climb on the captured co-activation
    // mass until no single swap improves it; swaps keep capacity exact
    auto expert_mass = [&](std::size_t l, std::size_t e, std::size_t shard) {
        std::size_t mass = 0;
        if (l > 0)
            for (std::size_t u = 0; u < experts; u++)
                if (placement.assign[l - 1][u] == shard)
                    mass += graph.counts[l - 1][u][e];
        if (l + 1 < layers)
            for (std::size_t v = 0; v < experts; v++)
                if (placement.assign[l + 1][v] == shard)
                    mass += graph.counts[l][e][v];
        return mass;
    };
    bool improved = true;
    while (improved) {
        improved = false;
        for (std::size_t l = 0; l < layers; l++)
            for (std::size_t e1 = 0; e1 < experts; e1++)
                for (std::size_t e2 = e1 + 1; e2 < experts; e2++) {
                    const std::size_t s1 = placement.assign[l][e1];
                    const std::size_t s2 = placement.assign[l][e2];
                    if (s1 == s2)
                        continue;
                    const std::size_t before = expert_mass(l, e1, s1) + expert_mass(l, e2, s2);
                    const std::size_t after = expert_mass(l, e1, s2) + expert_mass(l, e2, s1);
                    if (after > before) {
                        placement.assign[l][e1] = s2;
                        placement.assign[l][e2] = s1;
                        improved = true;
                    }
                }
    }
    return placement;
}

std::size_t coupled_mass(const CoActivationGraph &graph, const Placement &placement)
{
    std::size_t mass = 0;
    for (std::size_t l = 0; l + 1 < graph.layers; l++)
        for (std::size_t e = 0; e < graph.experts; e++)
            for (std::size_t v = 0; v < graph.experts; v++)
                if (placement.shard_of(l, e) == placement.shard_of(l + 1, v))
                    mass += graph.counts[l][e][v];
    return mass;
}

CostReport bucket_and_score(const RoutingTrace &trace, const Placement &placement,
                            std::size_t seq_len, double remote_penalty)
{
    require(trace.step_count() > 0, "bucket_and_score: empty trace");
    require(placement.assign.size() == trace.layers, "bucket_and_score: placement layer mismatch");
    for (const auto &layer : placement.assign)
        require(layer.size() == trace.experts, "bucket_and_score: placement expert mismatch");
    const std::size_t positions = seq_len == 0 ? trace.batch : seq_len;
    require(trace.batch % positions == 0,
            "bucket_and_score: trace batch is not divisible by the sequence length");
    require(remote_penalty >= 0.0 && remote_penalty < 1.0,
            "bucket_and_score: remote penalty must lie in [0, 1)");

    std::size_t local = 0, total = 0;
    for (std::size_t s = 0; s < trace.step_count(); s++) {
        for (std::size_t seq = 0; seq * positions < trace.batch; seq++) {
            const std::size_t begin = seq * positions;
            // majority shard of the sequence's first-layer top-1 experts
            std::vector<std::size_t> votes(placement.shards, 0);
            for (std::size_t p = 0; p < positions; p++)
                votes[placement.shard_of(0, trace.top1(s, 0, begin + p))]++;
            std::size_t bucket = 0;
            for (std::size_t sh = 1; sh < placement.shards; sh++)
                if (votes[sh] > votes[bucket])
                    bucket = sh;

            for (std::size_t p = 0; p < positions; p++)
                for (std::size_t l = 0; l < trace.layers; l++) {
                    const std::size_t expert = trace.top1(s, l, begin + p);
                    if (placement.shard_of(l, expert) == bucket)
                        local++;
                    total++;
                }
        }
    }

    CostReport report;
    report.local_fraction = static_cast<double>(local) / static_cast<double>(total);
    report.remote_dispatches = total - local;
    const double remote_fraction = 1.0 - report.local_fraction;
    report.est_throughput_ratio = 1.0 / (1.0 - remote_penalty * remote_fraction);
    return report;
}

} // namespace moelab
