#include "gridvl/grammar.hpp"

#include <sstream>

#include "gridvl/errors.hpp"

namespace gridvl {

namespace {

const char* kAgents[Grammar::kNumAgents] = {"C", "O"};
const char* kColors[Grammar::kNumColors] = {"red", "green", "blue", "yellow"};
const char* kShapes[3] = {"square", "circle", "triangle"};
const char* kDirections[Grammar::kNumDirections] = {"left", "right", "up",
                                                    "down"};
const char* kDirAdverbs[Grammar::kNumDirections] = {"leftward", "rightward",
                                                    "upward", "downward"};
// First form of each class is canonical.
const char* kVerbForms[Grammar::kNumActions][Grammar::kVerbFormsPerAction] = {
    {"moves", "shifts", "slides"},
    {"pushes", "shoves", "drags"},
};
const char* kParticiples[Grammar::kNumActions][Grammar::kVerbFormsPerAction] = {
    {"moved", "shifted", "slid"},
    {"pushed", "shoved", "dragged"},
};

} // namespace

Grammar::Grammar(int num_shapes) : num_shapes_(num_shapes) {
    if (num_shapes_ < 1 || num_shapes_ > 3) {
        throw ConfigError("grammar: num_shapes must be in [1, 3]");
    }
    auto intern = [this](const std::string& tok) {
        if (!token_ids_.count(tok)) {
            token_ids_[tok] = static_cast<int>(vocab_.size());
            vocab_.push_back(tok);
        }
    };
    intern("<s>");
    intern("</s>");
    for (int a = 0; a < kNumAgents; ++a) {
        intern(kAgents[a]);
        agent_to_id_[kAgents[a]] = a;
    }
    for (int v = 0; v < kNumActions; ++v) {
        for (int f = 0; f < kVerbFormsPerAction; ++f) {
            intern(kVerbForms[v][f]);
            verb_to_action_[kVerbForms[v][f]] = v;
            intern(kParticiples[v][f]);
            participle_to_action_[kParticiples[v][f]] = v;
        }
    }
    intern("the");
    intern("is");
    intern("by");
    for (int c = 0; c < kNumColors; ++c) {
        intern(kColors[c]);
        color_to_id_[kColors[c]] = c;
    }
    for (int s = 0; s < num_shapes_; ++s) {
        intern(kShapes[s]);
        shape_to_id_[kShapes[s]] = s;
    }
    for (int d = 0; d < kNumDirections; ++d) {
        intern(kDirections[d]);
        direction_surface_to_id_[kDirections[d]] = d;
        intern(kDirAdverbs[d]);
        direction_surface_to_id_[kDirAdverbs[d]] = d;
    }
}

int Grammar::token_id(const std::string& token) const {
    auto it = token_ids_.find(token);
    if (it == token_ids_.end()) {
        throw VocabError("unknown token: '" + token + "'");
    }
    return it->second;
}

std::vector<int> Grammar::encode(const std::vector<std::string>& tokens) const {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) {
        ids.push_back(token_id(t));
    }
    return ids;
}

std::vector<std::string> Grammar::decode(const std::vector<int>& ids) const {
    std::vector<std::string> tokens;
    tokens.reserve(ids.size());
    for (int id : ids) {
        if (id < 0 || id >= vocab_size()) {
            throw VocabError("token id out of range: " + std::to_string(id));
        }
        tokens.push_back(vocab_[id]);
    }
    return tokens;
}

void Grammar::check_event(const Event& e) const {
    if (e.agent < 0 || e.agent >= kNumAgents || e.action < 0 ||
        e.action >= kNumActions || e.color < 0 || e.color >= kNumColors ||
        e.shape < 0 || e.shape >= num_shapes_ || e.direction < 0 ||
        e.direction >= kNumDirections) {
        throw CatalogError("event ids outside the grammar catalogs");
    }
}

const std::string& Grammar::direction_surface(int direction,
                                              int dir_form) const {
    static const std::string canon[] = {kDirections[0], kDirections[1],
                                        kDirections[2], kDirections[3]};
    static const std::string adverb[] = {kDirAdverbs[0], kDirAdverbs[1],
                                         kDirAdverbs[2], kDirAdverbs[3]};
    return dir_form == 0 ? canon[direction] : adverb[direction];
}

std::vector<std::string> Grammar::render_active(const Event& e, int verb_form,
                                                int dir_form) const {
    return {kAgents[e.agent],
            kVerbForms[e.action][verb_form],
            "the",
            kColors[e.color],
            kShapes[e.shape],
            direction_surface(e.direction, dir_form)};
}

std::vector<std::string> Grammar::render_passive(const Event& e, int part_form,
                                                 int dir_form) const {
    return {"the",
            kColors[e.color],
            kShapes[e.shape],
            "is",
            kParticiples[e.action][part_form],
            direction_surface(e.direction, dir_form),
            "by",
            kAgents[e.agent]};
}

std::vector<std::string> Grammar::narrate(const Event& event) const {
    check_event(event);
    return render_active(event, 0, 0);
}

std::vector<std::vector<std::string>> Grammar::paraphrases(
    const Event& event) const {
    check_event(event);
    std::vector<std::vector<std::string>> out;
    for (int vf = 0; vf < kVerbFormsPerAction; ++vf) {
        for (int df = 0; df < 2; ++df) {
            if (vf == 0 && df == 0) {
                continue; // canonical rendering
            }
            out.push_back(render_active(event, vf, df));
        }
    }
    for (int pf = 0; pf < kVerbFormsPerAction; ++pf) {
        for (int df = 0; df < 2; ++df) {
            out.push_back(render_passive(event, pf, df));
        }
    }
    return out;
}

bool Grammar::try_parse(const std::vector<std::string>& tokens,
                        Event* out) const {
    Event e;
    if (tokens.size() == 6 && tokens[2] == "the") {
        auto agent = agent_to_id_.find(tokens[0]);
        auto verb = verb_to_action_.find(tokens[1]);
        auto color = color_to_id_.find(tokens[3]);
        auto shape = shape_to_id_.find(tokens[4]);
        auto dir = direction_surface_to_id_.find(tokens[5]);
        if (agent == agent_to_id_.end() || verb == verb_to_action_.end() ||
            color == color_to_id_.end() || shape == shape_to_id_.end() ||
            dir == direction_surface_to_id_.end()) {
            return false;
        }
        e.agent = agent->second;
        e.action = verb->second;
        e.color = color->second;
        e.shape = shape->second;
        e.direction = dir->second;
    } else if (tokens.size() == 8 && tokens[0] == "the" && tokens[3] == "is" &&
               tokens[6] == "by") {
        auto color = color_to_id_.find(tokens[1]);
        auto shape = shape_to_id_.find(tokens[2]);
        auto part = participle_to_action_.find(tokens[4]);
        auto dir = direction_surface_to_id_.find(tokens[5]);
        auto agent = agent_to_id_.find(tokens[7]);
        if (color == color_to_id_.end() || shape == shape_to_id_.end() ||
            part == participle_to_action_.end() ||
            dir == direction_surface_to_id_.end() ||
            agent == agent_to_id_.end()) {
            return false;
        }
        e.agent = agent->second;
        e.action = part->second;
        e.color = color->second;
        e.shape = shape->second;
        e.direction = dir->second;
    } else {
        return false;
    }
    if (out) {
        *out = e;
    }
    return true;
}

Event Grammar::parse(const std::vector<std::string>& tokens) const {
    Event e;
    if (!try_parse(tokens, &e)) {
        throw ParseError("sentence does not match any template: '" +
                         join_tokens(tokens) + "'");
    }
    return e;
}

int Grammar::event_class(const Event& e) const {
    check_event(e);
    return (((e.agent * kNumActions + e.action) * kNumColors + e.color) *
                num_shapes_ +
            e.shape) *
               kNumDirections +
           e.direction;
}

Event Grammar::class_event(int cls) const {
    if (cls < 0 || cls >= num_event_classes()) {
        throw CatalogError("event class out of range: " + std::to_string(cls));
    }
    Event e;
    e.direction = cls % kNumDirections;
    cls /= kNumDirections;
    e.shape = cls % num_shapes_;
    cls /= num_shapes_;
    e.color = cls % kNumColors;
    cls /= kNumColors;
    e.action = cls % kNumActions;
    e.agent = cls / kNumActions;
    return e;
}

std::vector<std::string> Grammar::split_tokens(const std::string& text) {
    std::vector<std::string> tokens;
    std::istringstream in(text);
    std::string tok;
    while (in >> tok) {
        tokens.push_back(tok);
    }
    return tokens;
}

std::string Grammar::join_tokens(const std::vector<std::string>& tokens) {
    std::string out;
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (i) {
            out += ' ';
        }
        out += tokens[i];
    }
    return out;
}

} // namespace gridvl
