#pragma once

#include <cstdint>

namespace moelab {

// Counter-based generator: output i is a fixed integer mix of (seed, i), so
// an identical seed and call sequence reproduces the identical stream on
// every platform. Real-valued draws are fixed functions of the integer
// stream.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed) {}

    std::uint64_t next_u64();
    double uniform();                      // [0, 1)
    double normal();                       // standard normal (Box-Muller)
    std::uint64_t below(std::uint64_t n);  // uniform in [0, n)
    double range(double lo, double hi);

    // Independent derived stream, e.g. one per sequence or per worker.
    Rng fork(std::uint64_t stream) const;

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_ = 0;
    std::uint64_t counter_ = 0;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

} // namespace moelab
