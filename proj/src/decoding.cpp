#include "gridvl/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>

#include "gridvl/errors.hpp"

namespace gridvl {

DecodeStrategy decode_strategy_from_string(const std::string& s) {
    if (s == "greedy") return DecodeStrategy::Greedy;
    if (s == "nucleus") return DecodeStrategy::Nucleus;
    if (s == "beam") return DecodeStrategy::Beam;
    if (s == "diverse-beam") return DecodeStrategy::DiverseBeam;
    throw ConfigError("unknown decoding strategy: '" + s + "'");
}

std::string to_string(DecodeStrategy s) {
    switch (s) {
        case DecodeStrategy::Greedy: return "greedy";
        case DecodeStrategy::Nucleus: return "nucleus";
        case DecodeStrategy::Beam: return "beam";
        case DecodeStrategy::DiverseBeam: return "diverse-beam";
    }
    throw ConfigError("unknown decoding strategy value");
}

void DecodingConfig::validate() const {
    if (p <= 0.0 || p > 1.0) {
        throw ConfigError("decoding: p must be in (0, 1]");
    }
    if (num_candidates < 1 || beam_width < 1 || max_len < 1) {
        throw ConfigError("decoding: counts and max_len must be positive");
    }
    if (groups < 1) {
        throw ConfigError("decoding: groups must be positive");
    }
    if (strategy == DecodeStrategy::DiverseBeam && beam_width % groups != 0) {
        throw ConfigError("decoding: groups must divide beam_width");
    }
    if (diversity_penalty < 0.0) {
        throw ConfigError("decoding: diversity penalty must be >= 0");
    }
}

namespace {

void validate_dist(const Vec& dist) {
    double total = 0.0;
    for (int i = 0; i < dist.size(); ++i) {
        if (dist(i) < 0.0) {
            throw DomainError("distribution has a negative entry");
        }
        total += dist(i);
    }
    if (std::abs(total - 1.0) > 1e-6) {
        throw DomainError("distribution does not sum to 1");
    }
}

// Token ids sorted by descending probability, ties by ascending id.
std::vector<int> probability_order(const Vec& dist) {
    std::vector<int> order(dist.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return dist(a) > dist(b); });
    return order;
}

struct Beam {
    std::vector<int> tokens;
    double log_prob = 0.0;
    bool finished = false;
    // Selection-time fields for diverse grouping.
    double selection_score = 0.0;
    int chosen_token = -1; // -1 when carried forward unexpanded
};

bool beam_before(const Beam& a, const Beam& b) {
    if (a.log_prob != b.log_prob) {
        return a.log_prob > b.log_prob;
    }
    return a.tokens < b.tokens;
}

bool beam_before_penalized(const Beam& a, const Beam& b) {
    if (a.selection_score != b.selection_score) {
        return a.selection_score > b.selection_score;
    }
    return a.tokens < b.tokens;
}

bool any_unfinished(const std::vector<Beam>& pool) {
    return std::any_of(pool.begin(), pool.end(),
                       [](const Beam& b) { return !b.finished; });
}

std::vector<int> with_bos(int bos, const std::vector<int>& tokens) {
    std::vector<int> prefix;
    prefix.reserve(tokens.size() + 1);
    prefix.push_back(bos);
    prefix.insert(prefix.end(), tokens.begin(), tokens.end());
    return prefix;
}

} // namespace

int nucleus_step(const Vec& dist, double p, Rng& rng) {
    if (p <= 0.0 || p > 1.0) {
        throw DomainError("nucleus mass must be in (0, 1]");
    }
    validate_dist(dist);
    auto order = probability_order(dist);
    // Smallest prefix with cumulative mass >= p; zero-probability tokens can
    // never enter (they sort last and the cumulative test fires before them).
    double mass = 0.0;
    size_t cut = 0;
    for (size_t i = 0; i < order.size(); ++i) {
        double q = dist(order[i]);
        if (q <= 0.0) {
            break;
        }
        mass += q;
        cut = i + 1;
        if (mass >= p - 1e-12) {
            break;
        }
    }
    if (cut == 0) {
        throw DomainError("distribution has no positive mass");
    }
    double r = rng.uniform() * mass;
    double acc = 0.0;
    for (size_t i = 0; i < cut; ++i) {
        acc += dist(order[i]);
        if (r < acc) {
            return order[i];
        }
    }
    return order[cut - 1];
}

int greedy_step(const Vec& dist) {
    if (dist.size() == 0) {
        throw DomainError("empty distribution");
    }
    int best = 0;
    for (int i = 1; i < dist.size(); ++i) {
        if (dist(i) > dist(best)) {
            best = i;
        }
    }
    return best;
}

std::vector<int> sample_sequence(const StepFn& step, int bos, int eos,
                                 double p, int max_len, Rng& rng) {
    std::vector<int> prefix = {bos};
    std::vector<int> body;
    for (int t = 0; t < max_len; ++t) {
        int tok = nucleus_step(step(prefix), p, rng);
        if (tok == eos) {
            break;
        }
        body.push_back(tok);
        prefix.push_back(tok);
    }
    return body;
}

std::vector<ScoredSequence> beam_search(const StepFn& step, int bos, int eos,
                                        int beam_width, int max_len) {
    if (beam_width < 1 || max_len < 1) {
        throw ConfigError("beam search needs beam_width >= 1 and max_len >= 1");
    }
    std::vector<Beam> pool = {Beam{}};
    for (int t = 0; t < max_len && any_unfinished(pool); ++t) {
        std::vector<Beam> next;
        for (const auto& beam : pool) {
            if (beam.finished) {
                next.push_back(beam);
                continue;
            }
            Vec dist = step(with_bos(bos, beam.tokens));
            validate_dist(dist);
            for (int v = 0; v < dist.size(); ++v) {
                if (dist(v) <= 0.0) {
                    continue;
                }
                Beam child = beam;
                child.log_prob += std::log(dist(v));
                if (v == eos) {
                    child.finished = true;
                } else {
                    child.tokens.push_back(v);
                }
                next.push_back(std::move(child));
            }
        }
        std::sort(next.begin(), next.end(), beam_before);
        if (static_cast<int>(next.size()) > beam_width) {
            next.resize(beam_width);
        }
        pool = std::move(next);
    }
    std::sort(pool.begin(), pool.end(), beam_before);
    std::vector<ScoredSequence> out;
    out.reserve(pool.size());
    for (auto& b : pool) {
        out.push_back({std::move(b.tokens), b.log_prob, 0});
    }
    return out;
}

std::vector<ScoredSequence> diverse_beam_search(const StepFn& step, int bos,
                                                int eos, int beam_width,
                                                int groups,
                                                double diversity_penalty,
                                                int max_len) {
    if (beam_width < 1 || groups < 1 || beam_width % groups != 0) {
        throw ConfigError("diverse beam search needs groups dividing beam_width");
    }
    if (diversity_penalty < 0.0) {
        throw ConfigError("diversity penalty must be >= 0");
    }
    if (max_len < 1) {
        throw ConfigError("max_len must be >= 1");
    }
    const int per_group = beam_width / groups;
    std::vector<std::vector<Beam>> pools(groups, std::vector<Beam>{Beam{}});
    auto anyone_unfinished = [&] {
        return std::any_of(pools.begin(), pools.end(),
                           [](const auto& p) { return any_unfinished(p); });
    };
    for (int t = 0; t < max_len && anyone_unfinished(); ++t) {
        // Times each token was selected at this step by earlier groups.
        std::map<int, int> step_counts;
        for (int g = 0; g < groups; ++g) {
            std::vector<Beam> candidates;
            for (const auto& beam : pools[g]) {
                if (beam.finished) {
                    Beam carried = beam;
                    carried.selection_score = carried.log_prob;
                    carried.chosen_token = -1;
                    candidates.push_back(std::move(carried));
                    continue;
                }
                Vec dist = step(with_bos(bos, beam.tokens));
                validate_dist(dist);
                for (int v = 0; v < dist.size(); ++v) {
                    if (dist(v) <= 0.0) {
                        continue;
                    }
                    Beam child = beam;
                    child.log_prob += std::log(dist(v));
                    child.chosen_token = v;
                    auto it = step_counts.find(v);
                    int prior = it == step_counts.end() ? 0 : it->second;
                    child.selection_score =
                        child.log_prob - diversity_penalty * prior;
                    if (v == eos) {
                        child.finished = true;
                    } else {
                        child.tokens.push_back(v);
                    }
                    candidates.push_back(std::move(child));
                }
            }
            std::sort(candidates.begin(), candidates.end(),
                      beam_before_penalized);
            if (static_cast<int>(candidates.size()) > per_group) {
                candidates.resize(per_group);
            }
            for (const auto& b : candidates) {
                if (b.chosen_token >= 0) {
                    ++step_counts[b.chosen_token];
                }
            }
            pools[g] = std::move(candidates);
        }
    }
    std::vector<ScoredSequence> out;
    out.reserve(beam_width);
    for (int g = 0; g < groups; ++g) {
        std::sort(pools[g].begin(), pools[g].end(), beam_before);
        for (auto& b : pools[g]) {
            out.push_back({std::move(b.tokens), b.log_prob, g});
        }
    }
    return out;
}

} // namespace gridvl
