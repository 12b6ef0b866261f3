#include "gridvl/rephraser.hpp"

#include <cctype>
#include <unordered_set>

namespace gridvl {

namespace {

std::string strip_punctuation(const std::string& sentence) {
    std::vector<std::string> kept;
    for (const auto& token : Grammar::split_tokens(sentence)) {
        std::string bare;
        for (char ch : token) {
            if (!std::ispunct(static_cast<unsigned char>(ch))) {
                bare.push_back(ch);
            }
        }
        if (!bare.empty()) {
            kept.push_back(bare);
        }
    }
    return Grammar::join_tokens(kept);
}

} // namespace

std::vector<std::string> postprocess(
    const std::vector<std::string>& candidates) {
    std::vector<std::string> out;
    std::unordered_set<std::string> seen;
    for (const auto& c : candidates) {
        std::string bare = strip_punctuation(c);
        if (seen.insert(bare).second) {
            out.push_back(bare);
        }
    }
    return out;
}

std::vector<std::string> rephrase(const std::string& sentence,
                                  const Grammar& grammar,
                                  const RephraserConfig& cfg) {
    Event event;
    if (!grammar.try_parse(Grammar::split_tokens(sentence), &event)) {
        return {};
    }
    std::vector<std::string> pool;
    pool.push_back(Grammar::join_tokens(grammar.narrate(event)));
    for (const auto& variant : grammar.paraphrases(event)) {
        pool.push_back(Grammar::join_tokens(variant));
    }
    pool = postprocess(pool);
    const std::string self = strip_punctuation(sentence);
    std::vector<std::string> out;
    for (const auto& c : pool) {
        if (static_cast<int>(out.size()) >= cfg.max_candidates) {
            break;
        }
        if (c != self) {
            out.push_back(c);
        }
    }
    return out;
}

} // namespace gridvl
