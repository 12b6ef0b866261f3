#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace gridvl {

// An atomic annotated happening: an agent acts on a colored shape in a
// direction. Ids index the closed catalogs below.
struct Event {
    int agent = 0;
    int action = 0;
    int color = 0;
    int shape = 0;
    int direction = 0;

    bool operator==(const Event& o) const {
        return agent == o.agent && action == o.action && color == o.color &&
               shape == o.shape && direction == o.direction;
    }
};

// Closed template grammar over the grid world. Two sentence templates:
//   active:  "<agent> <verb> the <color> <shape> <direction>"
//   passive: "the <color> <shape> is <participle> <direction> by <agent>"
// with synonym classes for verbs and adverbial direction forms. Every
// rendering parses back to its source event, and the induced vocabulary is
// closed: no rendering can emit a token outside vocab().
class Grammar {
public:
    explicit Grammar(int num_shapes = 3);

    static constexpr int kNumAgents = 2;
    static constexpr int kNumActions = 2;
    static constexpr int kNumColors = 4;
    static constexpr int kNumDirections = 4;
    static constexpr int kVerbFormsPerAction = 3;

    int num_shapes() const { return num_shapes_; }
    int num_event_classes() const {
        return kNumAgents * kNumActions * kNumColors * num_shapes_ *
               kNumDirections;
    }

    // Tokens. Ids 0 and 1 are reserved for sentence delimiters.
    int bos_id() const { return 0; }
    int eos_id() const { return 1; }
    const std::vector<std::string>& vocab() const { return vocab_; }
    int vocab_size() const { return static_cast<int>(vocab_.size()); }
    int token_id(const std::string& token) const; // throws VocabError
    std::vector<int> encode(const std::vector<std::string>& tokens) const;
    std::vector<std::string> decode(const std::vector<int>& ids) const;

    // Canonical narration (active template, first synonym of each class).
    std::vector<std::string> narrate(const Event& event) const;
    // Every non-canonical rendering of the event, in a fixed order.
    std::vector<std::vector<std::string>> paraphrases(const Event& event) const;

    Event parse(const std::vector<std::string>& tokens) const; // throws ParseError
    bool try_parse(const std::vector<std::string>& tokens, Event* out) const;

    // Dense index over (agent, action, color, shape, direction).
    int event_class(const Event& event) const;
    Event class_event(int cls) const;

    static std::vector<std::string> split_tokens(const std::string& text);
    static std::string join_tokens(const std::vector<std::string>& tokens);

private:
    void check_event(const Event& event) const;
    std::vector<std::string> render_active(const Event& event, int verb_form,
                                           int dir_form) const;
    std::vector<std::string> render_passive(const Event& event, int part_form,
                                            int dir_form) const;
    const std::string& direction_surface(int direction, int dir_form) const;

    int num_shapes_;
    std::vector<std::string> vocab_;
    std::unordered_map<std::string, int> token_ids_;
    std::unordered_map<std::string, int> verb_to_action_;
    std::unordered_map<std::string, int> participle_to_action_;
    std::unordered_map<std::string, int> direction_surface_to_id_;
    std::unordered_map<std::string, int> agent_to_id_;
    std::unordered_map<std::string, int> color_to_id_;
    std::unordered_map<std::string, int> shape_to_id_;
};

} // namespace gridvl
