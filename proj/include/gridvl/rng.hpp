#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace gridvl {

// Deterministic RNG with named substreams. Every random decision in the
// project flows from one global seed through Rng::fork, so runs are
// reproducible byte-for-byte across platforms. Draw primitives are
// implemented by hand (not std::uniform_*_distribution) because the standard
// distributions are implementation-defined.
class Rng {
public:
    explicit Rng(uint64_t seed);

    // Derives an independent stream from this stream's seed and a name.
    // Does not consume state from the parent.
    Rng fork(std::string_view name) const;
    Rng fork(std::string_view name, uint64_t index) const;

    uint64_t next_u64();

    // Uniform double in [0, 1).
    double uniform();

    // Uniform integer in [lo, hi), hi > lo.
    int uniform_int(int lo, int hi);

    // Standard normal via Box-Muller (one spare cached).
    double normal();

    // Fisher-Yates with our own bounded draws.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(0, static_cast<int>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

    uint64_t seed() const { return seed_; }

private:
    uint64_t seed_;
    uint64_t state_; // splitmix64 state
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// FNV-1a over bytes; used for substream derivation and artifact checksums.
uint64_t fnv1a(std::string_view bytes);
uint64_t fnv1a(const void* data, size_t n, uint64_t basis);

} // namespace gridvl
