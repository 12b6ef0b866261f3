#pragma once

#include <functional>
#include <vector>

#include "gridvl/autograd.hpp"
#include "gridvl/rng.hpp"

namespace gridvl {

enum class DecodeStrategy { Greedy, Nucleus, Beam, DiverseBeam };

DecodeStrategy decode_strategy_from_string(const std::string& s);
std::string to_string(DecodeStrategy s);

struct DecodingConfig {
    DecodeStrategy strategy = DecodeStrategy::Nucleus;
    double p = 0.95;                // nucleus mass
    int num_candidates = 10;        // K independent samples
    int beam_width = 20;            // B
    int groups = 20;                // G, must divide B
    double diversity_penalty = 0.7; // lambda
    int max_len = 16;

    void validate() const; // throws ConfigError
};

// Maps a prefix (starting with BOS) to a probability distribution over the
// vocabulary. Must sum to 1 within 1e-6.
using StepFn = std::function<Vec(const std::vector<int>&)>;

// One draw from the nucleus: the smallest probability-sorted prefix of the
// vocabulary with cumulative mass >= p (ties by ascending token id),
// renormalized. p in (0, 1].
int nucleus_step(const Vec& dist, double p, Rng& rng);

// Argmax with ties broken by lowest token id.
int greedy_step(const Vec& dist);

// Nucleus-samples one sequence. The returned tokens exclude BOS and EOS;
// generation stops at EOS or after max_len body tokens.
std::vector<int> sample_sequence(const StepFn& step, int bos, int eos,
                                 double p, int max_len, Rng& rng);

struct ScoredSequence {
    std::vector<int> tokens; // body tokens, no BOS/EOS
    double log_prob = 0.0;   // raw sum of step log-probs (EOS step included)
    int group = 0;           // diverse beam group, 0 otherwise

    bool operator==(const ScoredSequence& o) const {
        return tokens == o.tokens && log_prob == o.log_prob;
    }
};

// Width-B search over raw log-prob sums, no length normalization. Sequences
// end at EOS (whose log-prob is counted) or at max_len. Results are sorted
// by descending log-prob, ties by ascending token sequence.
std::vector<ScoredSequence> beam_search(const StepFn& step, int bos, int eos,
                                        int beam_width, int max_len);

// Hamming-diversity grouped variant: groups are filled in order, and within
// one time step a candidate token's selection score is lowered by
// diversity_penalty for every earlier group that chose the same token at
// this step. Collapses to beam_search when groups == 1 or penalty == 0 and
// groups == 1. Output is group-major; log_prob stays the raw sum.
std::vector<ScoredSequence> diverse_beam_search(const StepFn& step, int bos,
                                                int eos, int beam_width,
                                                int groups,
                                                double diversity_penalty,
                                                int max_len);

} // namespace gridvl
