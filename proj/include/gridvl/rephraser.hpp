#pragma once

#include <string>
#include <vector>

#include "gridvl/grammar.hpp"

namespace gridvl {

struct RephraserConfig {
    int max_candidates = 3;
};

// Strips punctuation characters from every token, drops tokens that become
// empty, and removes exact duplicates keeping first occurrences. Applying it
// twice changes nothing.
std::vector<std::string> postprocess(const std::vector<std::string>& candidates);

// Deterministic rule-based paraphrasing: parse the sentence, render the
// event's alternative surface forms (canonical first, then the grammar's
// fixed paraphrase order), post-process, and keep the first max_candidates
// that differ from the input. Unparseable input yields no candidates. Every
// candidate parses back to the same event as the input.
std::vector<std::string> rephrase(const std::string& sentence,
                                  const Grammar& grammar,
                                  const RephraserConfig& cfg = {});

} // namespace gridvl
