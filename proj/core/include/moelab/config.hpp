#pragma once

#include <string>

#include <moelab/moe.hpp>
#include <moelab/synth.hpp>
#include <moelab/trainer.hpp>

namespace moelab {

// Input problems (bad config text, missing files) that map to exit code 2 in
// the CLI, as opposed to runtime assertion failures.
class UsageError : public Error {
public:
    using Error::Error;
};

// Everything a run needs, serializable as sectioned key = value text. An
// echoed copy is written next to every output artifact so a run's provenance
// lives in one file.
struct RunConfig {
    std::uint64_t seed = 1;
    std::string out_dir; // optional; flags and OUTPUT_DIR take precedence
    MoeConfig model;
    SynthConfig synth;
    TrainConfig train;
    std::size_t shards = 2;
    double remote_penalty = 0.1;

    // derived per-purpose seed streams, stable across modules
    std::uint64_t init_seed() const;
    std::uint64_t corpus_seed() const;
    std::uint64_t plant_seed() const;
    std::uint64_t batch_seed() const;

    void validate() const;
    bool operator==(const RunConfig &o) const;
};

RunConfig default_run_config();

// Throws UsageError with a line-precise message on any problem; unknown keys
// and sections are rejected.
RunConfig parse_config(const std::string &text, const std::string &origin = "<config>");
RunConfig load_config(const std::string &path);
std::string emit_config(const RunConfig &cfg);

} // namespace moelab
