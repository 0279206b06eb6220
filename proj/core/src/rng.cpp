#include <moelab/rng.hpp>

#include <cmath>

namespace moelab {

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

std::uint64_t mix64(std::uint64_t z)
{
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

} // namespace

std::uint64_t Rng::next_u64()
{
    counter_++;
    return mix64(seed_ + kGolden * counter_);
}

double Rng::uniform()
{
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal()
{
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    // u1 in (0, 1] so the log is finite
    const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
}

std::uint64_t Rng::below(std::uint64_t n)
{
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
}

double Rng::range(double lo, double hi)
{
    return lo + (hi - lo) * uniform();
}

Rng Rng::fork(std::uint64_t stream) const
{
    return Rng(mix64(seed_ + kGolden * (stream + 1)) ^ 0xD1B54A32D192ED03ull);
}

} // namespace moelab
