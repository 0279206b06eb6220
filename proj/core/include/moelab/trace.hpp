#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <moelab/error.hpp>

namespace moelab {

// Per-token, per-layer routing record. Scores are quantized to f32 at
// recording time, matching the on-disk layout, so serialize → parse is
// exact.
//
// Binary file layout (little-endian):
//   magic "MOET", version u32, B u32, L u32, E u32, k u32
//   then per (step, layer, token):
//     token_id u32, active k×u16 (ranked), scores E×f32
// The number of steps is implied by the file size.
struct RoutingTrace {
    static constexpr std::uint32_t kVersion = 1;

    std::uint32_t batch = 0;   // tokens per step
    std::uint32_t layers = 0;  // L
    std::uint32_t experts = 0; // E
    std::uint32_t top_k = 0;   // k

    struct Entry {
        std::uint32_t token_id = 0;
        std::vector<std::uint16_t> active; // k entries, ranked by selection value
        std::vector<float> scores;         // E entries, bias-free softmax
    };

    // indexed [step][layer][token]
    std::vector<std::vector<std::vector<Entry>>> steps;

    std::size_t step_count() const { return steps.size(); }
    std::uint16_t top1(std::size_t step, std::size_t layer, std::size_t token) const
    {
        return steps[step][layer][token].active[0];
    }
    const Entry &at(std::size_t step, std::size_t layer, std::size_t token) const
    {
        return steps[step][layer][token];
    }

    void append_step(std::vector<std::vector<Entry>> step);
    bool config_matches(const RoutingTrace &o) const
    {
        return batch == o.batch && layers == o.layers && experts == o.experts && top_k == o.top_k;
    }
};

void write_trace(const RoutingTrace &trace, const std::string &path);
RoutingTrace read_trace(const std::string &path);

} // namespace moelab
