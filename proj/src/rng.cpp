#include "gridvl/rng.hpp"

#include <cmath>

#include "gridvl/errors.hpp"

namespace gridvl {

namespace {

constexpr uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr uint64_t kFnvPrime = 1099511628211ULL;

uint64_t splitmix64(uint64_t& x) {
    x += 0x9E3779B97F4A7C15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

} // namespace

uint64_t fnv1a(const void* data, size_t n, uint64_t basis) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = basis;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= kFnvPrime;
    }
    return h;
}

uint64_t fnv1a(std::string_view bytes) {
    return fnv1a(bytes.data(), bytes.size(), kFnvOffset);
}

Rng::Rng(uint64_t seed) : seed_(seed), state_(seed) {
    // Warm up so that small seeds diverge immediately.
    splitmix64(state_);
    splitmix64(state_);
}

Rng Rng::fork(std::string_view name) const {
    uint64_t derived = seed_ ^ fnv1a(name);
    // Mix once more so fork("a") of seed s differs from Rng(s ^ fnv("a")).
    uint64_t tmp = derived + 0x632BE59BD9B4E019ULL;
    return Rng(splitmix64(tmp));
}

Rng Rng::fork(std::string_view name, uint64_t index) const {
    uint64_t h = fnv1a(name);
    h = fnv1a(&index, sizeof(index), h);
    uint64_t derived = seed_ ^ h;
    uint64_t tmp = derived + 0x632BE59BD9B4E019ULL;
    return Rng(splitmix64(tmp));
}

uint64_t Rng::next_u64() {
    return splitmix64(state_);
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

int Rng::uniform_int(int lo, int hi) {
    if (hi <= lo) {
        throw DomainError("uniform_int: empty range");
    }
    uint64_t span = static_cast<uint64_t>(hi) - static_cast<uint64_t>(lo);
    // Rejection sampling to avoid modulo bias.
    uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t x = next_u64();
    while (x >= limit) {
        x = next_u64();
    }
    return lo + static_cast<int>(x % span);
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) {
        u1 = uniform();
    }
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

} // namespace gridvl
