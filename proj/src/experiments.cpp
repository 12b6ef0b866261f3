#include "gridvl/experiments.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include <json.hpp>

#include "gridvl/errors.hpp"
#include "gridvl/evaluation.hpp"
#include "gridvl/rephraser.hpp"

namespace gridvl {

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::string fmt_fixed(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

int to_int(const std::string& v, const std::string& where) {
    int out = 0;
    auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size())
        throw ParseError("bad integer for " + where + ": '" + v + "'");
    return out;
}

uint64_t to_u64(const std::string& v, const std::string& where) {
    uint64_t out = 0;
    auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size())
        throw ParseError("bad unsigned integer for " + where + ": '" + v +
                         "'");
    return out;
}

double to_double(const std::string& v, const std::string& where) {
    try {
        size_t pos = 0;
        double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing");
        return out;
    } catch (const std::exception&) {
        throw ParseError("bad number for " + where + ": '" + v + "'");
    }
}

bool to_bool(const std::string& v, const std::string& where) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ParseError("bad boolean for " + where + ": '" + v + "' (use true "
                     "or false)");
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(v);
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

const std::vector<std::string> kKnownArms = {"baseline", "rephraser",
                                             "recaption", "all"};

using Setter = std::function<void(ExperimentConfig&, const std::string&,
                                  const std::string&)>;
using SectionMap = std::map<std::string, std::map<std::string, Setter>>;

const SectionMap& config_setters() {
    static const SectionMap table = [] {
        SectionMap m;
        auto in = [](auto setter) {
            return [setter](ExperimentConfig& c, const std::string& v,
                            const std::string& w) { setter(c, v, w); };
        };
        m[""]["seed"] = in([](ExperimentConfig& c, const std::string& v,
                              const std::string& w) {
            c.seed = to_u64(v, w);
        });
        m[""]["out_dir"] = in([](ExperimentConfig& c, const std::string& v,
                                 const std::string&) { c.out_dir = v; });

        auto& w = m["world"];
        w["grid_size"] = in([](ExperimentConfig& c, const std::string& v,
                               const std::string& k) {
            c.world.grid_size = to_int(v, k);
        });
        w["num_shapes"] = in([](ExperimentConfig& c, const std::string& v,
                                const std::string& k) {
            c.world.num_shapes = to_int(v, k);
        });
        w["video_length"] = in([](ExperimentConfig& c, const std::string& v,
                                  const std::string& k) {
            c.world.video_length = to_int(v, k);
        });
        w["event_rate"] = in([](ExperimentConfig& c, const std::string& v,
                                const std::string& k) {
            c.world.event_rate = to_double(v, k);
        });
        w["num_videos"] = in([](ExperimentConfig& c, const std::string& v,
                                const std::string& k) {
            c.world.num_videos = to_int(v, k);
        });
        w["min_event_len"] = in([](ExperimentConfig& c, const std::string& v,
                                   const std::string& k) {
            c.world.min_event_len = to_int(v, k);
        });
        w["max_event_len"] = in([](ExperimentConfig& c, const std::string& v,
                                   const std::string& k) {
            c.world.max_event_len = to_int(v, k);
        });
        w["min_objects"] = in([](ExperimentConfig& c, const std::string& v,
                                 const std::string& k) {
            c.world.min_objects = to_int(v, k);
        });
        w["max_objects"] = in([](ExperimentConfig& c, const std::string& v,
                                 const std::string& k) {
            c.world.max_objects = to_int(v, k);
        });

        auto& co = m["corpus"];
        co["chunk_len"] = in([](ExperimentConfig& c, const std::string& v,
                                const std::string& k) {
            c.chunk_len = to_int(v, k);
        });
        co["keep_every"] = in([](ExperimentConfig& c, const std::string& v,
                                 const std::string& k) {
            c.keep_every = to_int(v, k);
        });
        co["held_out_fraction"] = in([](ExperimentConfig& c,
                                        const std::string& v,
                                        const std::string& k) {
            c.held_out_fraction = to_double(v, k);
        });

        auto& mo = m["model"];
        mo["patch"] = in([](ExperimentConfig& c, const std::string& v,
                            const std::string& k) {
            c.model.patch = to_int(v, k);
        });
        mo["frames_per_clip"] = in([](ExperimentConfig& c,
                                      const std::string& v,
                                      const std::string& k) {
            c.model.frames_per_clip = to_int(v, k);
        });
        mo["d_v"] = in([](ExperimentConfig& c, const std::string& v,
                          const std::string& k) { c.model.d_v = to_int(v, k); });
        mo["d_t"] = in([](ExperimentConfig& c, const std::string& v,
                          const std::string& k) { c.model.d_t = to_int(v, k); });
        mo["d"] = in([](ExperimentConfig& c, const std::string& v,
                        const std::string& k) { c.model.d = to_int(v, k); });
        mo["video_layers"] = in([](ExperimentConfig& c, const std::string& v,
                                   const std::string& k) {
            c.model.video_layers = to_int(v, k);
        });
        mo["text_layers"] = in([](ExperimentConfig& c, const std::string& v,
                                  const std::string& k) {
            c.model.text_layers = to_int(v, k);
        });
        mo["heads"] = in([](ExperimentConfig& c, const std::string& v,
                            const std::string& k) {
            c.model.heads = to_int(v, k);
        });
        mo["ff_mult"] = in([](ExperimentConfig& c, const std::string& v,
                              const std::string& k) {
            c.model.ff_mult = to_int(v, k);
        });
        mo["max_text_len"] = in([](ExperimentConfig& c, const std::string& v,
                                   const std::string& k) {
            c.model.max_text_len = to_int(v, k);
        });

        auto& na = m["narrator"];
        na["d_t"] = in([](ExperimentConfig& c, const std::string& v,
                          const std::string& k) {
            c.narrator.d_t = to_int(v, k);
        });
        na["lm_layers"] = in([](ExperimentConfig& c, const std::string& v,
                                const std::string& k) {
            c.narrator.lm_layers = to_int(v, k);
        });
        na["heads"] = in([](ExperimentConfig& c, const std::string& v,
                            const std::string& k) {
            c.narrator.heads = to_int(v, k);
        });
        na["ff_mult"] = in([](ExperimentConfig& c, const std::string& v,
                              const std::string& k) {
            c.narrator.ff_mult = to_int(v, k);
        });
        na["num_queries"] = in([](ExperimentConfig& c, const std::string& v,
                                  const std::string& k) {
            c.narrator.num_queries = to_int(v, k);
        });
        na["pool_heads"] = in([](ExperimentConfig& c, const std::string& v,
                                 const std::string& k) {
            c.narrator.pool_heads = to_int(v, k);
        });
        na["pool_dim"] = in([](ExperimentConfig& c, const std::string& v,
                               const std::string& k) {
            c.narrator.pool_dim = to_int(v, k);
        });
        na["insertion_period"] = in([](ExperimentConfig& c,
                                       const std::string& v,
                                       const std::string& k) {
            c.narrator.insertion_period = to_int(v, k);
        });
        na["lm_epochs"] = in([](ExperimentConfig& c, const std::string& v,
                                const std::string& k) {
            c.narrator.lm_epochs = to_int(v, k);
        });
        na["adapter_epochs"] = in([](ExperimentConfig& c,
                                     const std::string& v,
                                     const std::string& k) {
            c.narrator.adapter_epochs = to_int(v, k);
        });
        na["lm_lr"] = in([](ExperimentConfig& c, const std::string& v,
                            const std::string& k) {
            c.narrator.lm_lr = to_double(v, k);
        });
        na["adapter_lr"] = in([](ExperimentConfig& c, const std::string& v,
                                 const std::string& k) {
            c.narrator.adapter_lr = to_double(v, k);
        });
        na["held_out_fraction"] = in([](ExperimentConfig& c,
                                        const std::string& v,
                                        const std::string& k) {
            c.narrator.held_out_fraction = to_double(v, k);
        });
        na["filter_threshold"] = in([](ExperimentConfig& c,
                                       const std::string& v,
                                       const std::string& k) {
            c.narrator.filter_threshold = to_double(v, k);
        });

        m["rephraser"]["max_candidates"] =
            in([](ExperimentConfig& c, const std::string& v,
                  const std::string& k) {
                c.rephrase_max_candidates = to_int(v, k);
            });

        auto& de = m["decoding"];
        de["strategy"] = in([](ExperimentConfig& c, const std::string& v,
                               const std::string&) {
            c.decoding.strategy = decode_strategy_from_string(v);
        });
        de["top_p"] = in([](ExperimentConfig& c, const std::string& v,
                            const std::string& k) {
            c.decoding.p = to_double(v, k);
        });
        de["num_candidates"] = in([](ExperimentConfig& c,
                                     const std::string& v,
                                     const std::string& k) {
            c.decoding.num_candidates = to_int(v, k);
        });
        de["beam_width"] = in([](ExperimentConfig& c, const std::string& v,
                                 const std::string& k) {
            c.decoding.beam_width = to_int(v, k);
        });
        de["groups"] = in([](ExperimentConfig& c, const std::string& v,
                             const std::string& k) {
            c.decoding.groups = to_int(v, k);
        });
        de["diversity_penalty"] = in([](ExperimentConfig& c,
                                        const std::string& v,
                                        const std::string& k) {
            c.decoding.diversity_penalty = to_double(v, k);
        });
        de["max_len"] = in([](ExperimentConfig& c, const std::string& v,
                              const std::string& k) {
            c.decoding.max_len = to_int(v, k);
        });

        auto& tr = m["training"];
        tr["batch_labeled"] = in([](ExperimentConfig& c, const std::string& v,
                                    const std::string& k) {
            c.training.batch_labeled = to_int(v, k);
        });
        tr["batch_unlabeled"] = in([](ExperimentConfig& c,
                                      const std::string& v,
                                      const std::string& k) {
            c.training.batch_unlabeled = to_int(v, k);
        });
        tr["epochs"] = in([](ExperimentConfig& c, const std::string& v,
                             const std::string& k) {
            c.training.epochs = to_int(v, k);
        });
        tr["lr"] = in([](ExperimentConfig& c, const std::string& v,
                         const std::string& k) {
            c.training.lr = to_double(v, k);
        });
        tr["tau_r"] = in([](ExperimentConfig& c, const std::string& v,
                            const std::string& k) {
            c.training.tau_r = to_double(v, k);
        });
        tr["tau_n"] = in([](ExperimentConfig& c, const std::string& v,
                            const std::string& k) {
            c.training.tau_n = to_double(v, k);
        });
        tr["rephrase_prob"] = in([](ExperimentConfig& c, const std::string& v,
                                    const std::string& k) {
            c.training.rephrase_prob = to_double(v, k);
        });
        tr["finetune_epochs"] = in([](ExperimentConfig& c,
                                      const std::string& v,
                                      const std::string& k) {
            c.training.finetune_epochs = to_int(v, k);
        });
        tr["finetune_batch"] = in([](ExperimentConfig& c,
                                     const std::string& v,
                                     const std::string& k) {
            c.training.finetune_batch = to_int(v, k);
        });
        tr["finetune_lr"] = in([](ExperimentConfig& c, const std::string& v,
                                  const std::string& k) {
            c.training.finetune_lr = to_double(v, k);
        });
        tr["margin"] = in([](ExperimentConfig& c, const std::string& v,
                             const std::string& k) {
            c.training.margin = to_double(v, k);
        });
        tr["arms"] = in([](ExperimentConfig& c, const std::string& v,
                           const std::string&) {
            c.training.arms = split_list(v);
        });

        auto& ev = m["evaluation"];
        ev["probe"] = in([](ExperimentConfig& c, const std::string& v,
                            const std::string& k) {
            c.evaluation.probe = to_bool(v, k);
        });
        ev["mcq"] = in([](ExperimentConfig& c, const std::string& v,
                          const std::string& k) {
            c.evaluation.mcq = to_bool(v, k);
        });
        ev["zero_shot"] = in([](ExperimentConfig& c, const std::string& v,
                                const std::string& k) {
            c.evaluation.zero_shot = to_bool(v, k);
        });
        return m;
    }();
    return table;
}

std::string key_label(const std::string& section, const std::string& key) {
    return section.empty() ? key : section + "." + key;
}

} // namespace

ExperimentConfig parse_experiment_config(const std::string& text) {
    ExperimentConfig cfg;
    const SectionMap& table = config_setters();
    std::string section;
    std::istringstream in(text);
    std::string raw;
    int lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        std::string line = trim(raw);
        if (line.empty() || line[0] == '#') continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ParseError("line " + std::to_string(lineno) +
                                 ": unterminated section header");
            section = trim(line.substr(1, line.size() - 2));
            if (table.find(section) == table.end() || section.empty())
                throw ConfigError("unknown config section: [" + section + "]");
            continue;
        }
        size_t colon = line.find(':');
        if (colon == std::string::npos)
            throw ParseError("line " + std::to_string(lineno) +
                             ": expected 'key: value'");
        std::string key = trim(line.substr(0, colon));
        std::string value = trim(line.substr(colon + 1));
        auto sec = table.find(section);
        auto setter = sec->second.find(key);
        if (setter == sec->second.end())
            throw ConfigError("unknown config key: " +
                              key_label(section, key));
        setter->second(cfg, value, key_label(section, key));
    }
    return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_experiment_config(buf.str());
}

std::string ExperimentConfig::canonical_text() const {
    std::ostringstream s;
    s << "seed: " << seed << "\n";
    s << "out_dir: " << out_dir << "\n";
    s << "\n[world]\n";
    s << "grid_size: " << world.grid_size << "\n";
    s << "num_shapes: " << world.num_shapes << "\n";
    s << "video_length: " << world.video_length << "\n";
    s << "event_rate: " << fmt_double(world.event_rate) << "\n";
    s << "num_videos: " << world.num_videos << "\n";
    s << "min_event_len: " << world.min_event_len << "\n";
    s << "max_event_len: " << world.max_event_len << "\n";
    s << "min_objects: " << world.min_objects << "\n";
    s << "max_objects: " << world.max_objects << "\n";
    s << "\n[corpus]\n";
    s << "chunk_len: " << chunk_len << "\n";
    s << "keep_every: " << keep_every << "\n";
    s << "held_out_fraction: " << fmt_double(held_out_fraction) << "\n";
    s << "\n[model]\n";
    s << "patch: " << model.patch << "\n";
    s << "frames_per_clip: " << model.frames_per_clip << "\n";
    s << "d_v: " << model.d_v << "\n";
    s << "d_t: " << model.d_t << "\n";
    s << "d: " << model.d << "\n";
    s << "video_layers: " << model.video_layers << "\n";
    s << "text_layers: " << model.text_layers << "\n";
    s << "heads: " << model.heads << "\n";
    s << "ff_mult: " << model.ff_mult << "\n";
    s << "max_text_len: " << model.max_text_len << "\n";
    s << "\n[narrator]\n";
    s << "d_t: " << narrator.d_t << "\n";
    s << "lm_layers: " << narrator.lm_layers << "\n";
    s << "heads: " << narrator.heads << "\n";
    s << "ff_mult: " << narrator.ff_mult << "\n";
    s << "num_queries: " << narrator.num_queries << "\n";
    s << "pool_heads: " << narrator.pool_heads << "\n";
    s << "pool_dim: " << narrator.pool_dim << "\n";
    s << "insertion_period: " << narrator.insertion_period << "\n";
    s << "lm_epochs: " << narrator.lm_epochs << "\n";
    s << "adapter_epochs: " << narrator.adapter_epochs << "\n";
    s << "lm_lr: " << fmt_double(narrator.lm_lr) << "\n";
    s << "adapter_lr: " << fmt_double(narrator.adapter_lr) << "\n";
    s << "held_out_fraction: " << fmt_double(narrator.held_out_fraction)
      << "\n";
    s << "filter_threshold: " << fmt_double(narrator.filter_threshold)
      << "\n";
    s << "\n[rephraser]\n";
    s << "max_candidates: " << rephrase_max_candidates << "\n";
    s << "\n[decoding]\n";
    s << "strategy: " << to_string(decoding.strategy) << "\n";
    s << "top_p: " << fmt_double(decoding.p) << "\n";
    s << "num_candidates: " << decoding.num_candidates << "\n";
    s << "beam_width: " << decoding.beam_width << "\n";
    s << "groups: " << decoding.groups << "\n";
    s << "diversity_penalty: " << fmt_double(decoding.diversity_penalty)
      << "\n";
    s << "max_len: " << decoding.max_len << "\n";
    s << "\n[training]\n";
    s << "batch_labeled: " << training.batch_labeled << "\n";
    s << "batch_unlabeled: " << training.batch_unlabeled << "\n";
    s << "epochs: " << training.epochs << "\n";
    s << "lr: " << fmt_double(training.lr) << "\n";
    s << "tau_r: " << fmt_double(training.tau_r) << "\n";
    s << "tau_n: " << fmt_double(training.tau_n) << "\n";
    s << "rephrase_prob: " << fmt_double(training.rephrase_prob) << "\n";
    s << "finetune_epochs: " << training.finetune_epochs << "\n";
    s << "finetune_batch: " << training.finetune_batch << "\n";
    s << "finetune_lr: " << fmt_double(training.finetune_lr) << "\n";
    s << "margin: " << fmt_double(training.margin) << "\n";
    s << "arms: ";
    for (size_t i = 0; i < training.arms.size(); ++i) {
        if (i) s << ",";
        s << training.arms[i];
    }
    s << "\n";
    s << "\n[evaluation]\n";
    s << "probe: " << (evaluation.probe ? "true" : "false") << "\n";
    s << "mcq: " << (evaluation.mcq ? "true" : "false") << "\n";
    s << "zero_shot: " << (evaluation.zero_shot ? "true" : "false") << "\n";
    return s.str();
}

WorldConfig ExperimentConfig::world_config() const {
    WorldConfig w = world;
    w.seed = Rng(seed).fork("world").seed();
    return w;
}

DualEncoderConfig ExperimentConfig::encoder_config(
    const Grammar& grammar) const {
    DualEncoderConfig e;
    e.grid_size = world.grid_size;
    e.channels = world.channels();
    e.patch = model.patch;
    e.frames_per_clip = model.frames_per_clip;
    e.d_v = model.d_v;
    e.d_t = model.d_t;
    e.d = model.d;
    e.video_layers = model.video_layers;
    e.text_layers = model.text_layers;
    e.heads = model.heads;
    e.ff_mult = model.ff_mult;
    e.max_text_len = model.max_text_len;
    e.vocab_size = grammar.vocab_size();
    e.bos_id = grammar.bos_id();
    e.eos_id = grammar.eos_id();
    e.tau_r = training.tau_r;
    e.tau_n = training.tau_n;
    return e;
}

NarratorConfig ExperimentConfig::narrator_config(
    const Grammar& grammar) const {
    NarratorConfig n;
    n.vocab_size = grammar.vocab_size();
    n.bos_id = grammar.bos_id();
    n.eos_id = grammar.eos_id();
    n.d_t = narrator.d_t;
    n.lm_layers = narrator.lm_layers;
    n.heads = narrator.heads;
    n.ff_mult = narrator.ff_mult;
    n.max_text_len = model.max_text_len;
    n.d_v = model.d_v;
    n.num_queries = narrator.num_queries;
    n.pool_heads = narrator.pool_heads;
    n.pool_dim = narrator.pool_dim;
    n.insertion_period = narrator.insertion_period;
    return n;
}

TrainConfig ExperimentConfig::train_config() const {
    TrainConfig t;
    t.batch_labeled = training.batch_labeled;
    t.batch_unlabeled = training.batch_unlabeled;
    t.epochs = training.epochs;
    t.lr = training.lr;
    t.tau_r = training.tau_r;
    t.tau_n = training.tau_n;
    t.rephrase_prob = training.rephrase_prob;
    t.frames_per_clip = model.frames_per_clip;
    return t;
}

NarratorTrainConfig ExperimentConfig::narrator_train_config() const {
    NarratorTrainConfig n;
    n.lm_epochs = narrator.lm_epochs;
    n.adapter_epochs = narrator.adapter_epochs;
    n.lm_lr = narrator.lm_lr;
    n.adapter_lr = narrator.adapter_lr;
    n.held_out_fraction = narrator.held_out_fraction;
    n.frames_per_clip = model.frames_per_clip;
    return n;
}

FinetuneConfig ExperimentConfig::finetune_config() const {
    FinetuneConfig f;
    f.epochs = training.finetune_epochs;
    f.batch = training.finetune_batch;
    f.lr = training.finetune_lr;
    f.margin = training.margin;
    f.frames_per_clip = model.frames_per_clip;
    return f;
}

void ExperimentConfig::validate() const {
    if (out_dir.empty()) throw ConfigError("out_dir must be non-empty");
    world.validate();
    if (chunk_len < 1) throw ConfigError("corpus.chunk_len must be positive");
    if (keep_every < 1)
        throw ConfigError("corpus.keep_every must be positive");
    if (!(held_out_fraction > 0.0 && held_out_fraction < 1.0))
        throw ConfigError("corpus.held_out_fraction must lie in (0, 1)");
    if (narrator.filter_threshold < -1.0 || narrator.filter_threshold > 1.0)
        throw ConfigError("narrator.filter_threshold must lie in [-1, 1]");
    if (rephrase_max_candidates < 1)
        throw ConfigError("rephraser.max_candidates must be positive");
    if (training.arms.empty())
        throw ConfigError("training.arms must list at least one arm");
    std::set<std::string> seen;
    for (const auto& arm : training.arms) {
        if (std::find(kKnownArms.begin(), kKnownArms.end(), arm) ==
            kKnownArms.end())
            throw ConfigError("unknown arm in training.arms: '" + arm + "'");
        if (!seen.insert(arm).second)
            throw ConfigError("duplicate arm in training.arms: '" + arm +
                              "'");
    }
    Grammar grammar(world.num_shapes);
    encoder_config(grammar).validate();
    narrator_config(grammar).validate();
    decoding.validate();
    train_config().validate();
    narrator_train_config().validate();
    finetune_config().validate();
}

std::string resolve_out_dir(const std::string& out_dir) {
    std::filesystem::path p(out_dir);
    if (p.is_absolute()) return out_dir;
    const char* env = std::getenv("GRIDVL_OUT");
    if (env == nullptr || *env == '\0') return out_dir;
    return (std::filesystem::path(env) / p).string();
}

void MetricReport::add(const std::string& metric, const std::string& split,
                       double value, uint64_t seed) {
    rows.push_back({metric, split, value, seed});
}

double MetricReport::get(const std::string& metric) const {
    for (const auto& row : rows)
        if (row.metric == metric) return row.value;
    throw DataError("metric not in report: " + metric);
}

bool MetricReport::has(const std::string& metric) const {
    for (const auto& row : rows)
        if (row.metric == metric) return true;
    return false;
}

namespace {

std::ofstream open_out(const std::string& path) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path);
    return out;
}

} // namespace

void save_metric_csv(const std::string& path, const MetricReport& report) {
    std::ofstream out = open_out(path);
    out << "metric,split,value,seed\n";
    for (const auto& row : report.rows)
        out << row.metric << "," << row.split << "," << fmt_fixed(row.value)
            << "," << row.seed << "\n";
}

void save_metric_json(const std::string& path, const MetricReport& report) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : report.rows)
        rows.push_back({{"metric", row.metric},
                        {"split", row.split},
                        {"value", row.value},
                        {"seed", row.seed}});
    std::ofstream out = open_out(path);
    out << nlohmann::json{{"rows", rows}}.dump(2) << "\n";
}

MetricReport load_metric_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open for reading: " + path);
    MetricReport report;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (lineno == 1) {
            if (trim(line) != "metric,split,value,seed")
                throw ParseError(path + ": unexpected header");
            continue;
        }
        if (trim(line).empty()) continue;
        std::vector<std::string> cells = split_list(line);
        if (cells.size() != 4)
            throw ParseError(path + ":" + std::to_string(lineno) +
                             ": expected 4 cells");
        MetricRow row;
        row.metric = cells[0];
        row.split = cells[1];
        row.value = to_double(cells[2], "value");
        row.seed = to_u64(cells[3], "seed");
        report.rows.push_back(row);
    }
    return report;
}

std::string format_plan(const std::vector<StageStatus>& plan) {
    std::ostringstream s;
    for (const auto& st : plan) {
        s << (st.will_skip ? "skip " : "run  ") << st.name;
        if (!st.outputs.empty()) {
            s << " ->";
            for (const auto& o : st.outputs) s << " " << o;
        }
        s << "\n";
    }
    return s.str();
}

namespace {

const std::vector<std::string> kStageOrder = {
    "gen-world",       "clean",          "chunk-subset",
    "train-baseline",  "train-narrator", "cache-narrations",
    "rephrase",        "train-lavila",   "eval"};

std::map<std::string, const VideoRecord*> video_index(
    const std::vector<VideoRecord>& videos) {
    std::map<std::string, const VideoRecord*> index;
    for (const auto& v : videos) index[v.id] = &v;
    return index;
}

const VideoRecord& video_for(
    const std::map<std::string, const VideoRecord*>& index,
    const std::string& id) {
    auto it = index.find(id);
    if (it == index.end()) throw DataError("unknown video id: " + id);
    return *it->second;
}

CachedCandidates build_candidate_cache(
    const std::vector<ClipAnnotation>& rows, const Grammar& grammar) {
    std::map<std::tuple<std::string, int, int>,
             std::vector<std::vector<int>>>
        grouped;
    for (const auto& row : rows)
        grouped[{row.video_id, row.t, row.e}].push_back(
            grammar.encode(Grammar::split_tokens(row.narration)));
    CachedCandidates cache;
    for (auto& kv : grouped)
        cache.put(std::get<0>(kv.first), std::get<1>(kv.first),
                  std::get<2>(kv.first), std::move(kv.second));
    return cache;
}

} // namespace

Pipeline::Pipeline(const ExperimentConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    root_ = resolve_out_dir(cfg_.out_dir);
}

std::string Pipeline::artifact(const std::string& name) const {
    return (std::filesystem::path(root_) / name).string();
}

std::string Pipeline::arm_checkpoint(const std::string& arm) const {
    if (arm == "baseline") return artifact("baseline.ckpt");
    return artifact("arm_" + arm + ".ckpt");
}

const std::vector<std::string>& Pipeline::stage_names() {
    return kStageOrder;
}

std::vector<std::string> Pipeline::stage_outputs(
    const std::string& name) const {
    if (name == "gen-world")
        return {"videos.jsonl", "annotations_raw.jsonl"};
    if (name == "clean") return {"annotations.jsonl", "train.jsonl",
                                 "held.jsonl"};
    if (name == "chunk-subset") return {"labeled.jsonl", "unlabeled.jsonl"};
    if (name == "train-baseline")
        return {"baseline.ckpt", "log_baseline.jsonl"};
    if (name == "train-narrator")
        return {"narrator.ckpt", "narrator_metrics.json"};
    if (name == "cache-narrations") return {"narrated.jsonl"};
    if (name == "rephrase") return {"rephrased.jsonl"};
    if (name == "train-lavila") {
        std::vector<std::string> outs;
        for (const auto& arm : cfg_.training.arms) {
            if (arm == "baseline") continue;
            outs.push_back("arm_" + arm + ".ckpt");
            outs.push_back("log_arm_" + arm + ".jsonl");
        }
        return outs;
    }
    if (name == "eval") {
        std::vector<std::string> outs;
        for (const auto& arm : cfg_.training.arms) {
            outs.push_back("report_" + arm + ".csv");
            outs.push_back("report_" + arm + ".json");
        }
        outs.push_back("arms.csv");
        return outs;
    }
    throw ConfigError("unknown stage: " + name);
}

uint64_t Pipeline::stage_checksum(const std::string& name) const {
    std::ostringstream s;
    s << name << ";";
    auto chain = [&](const char* parent) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%016llx",
                      static_cast<unsigned long long>(stage_checksum(parent)));
        s << "<" << buf << ">;";
    };
    const auto& c = cfg_;
    if (name == "gen-world") {
        s << "seed=" << c.seed << ";grid=" << c.world.grid_size
          << ";shapes=" << c.world.num_shapes
          << ";len=" << c.world.video_length
          << ";rate=" << fmt_double(c.world.event_rate)
          << ";videos=" << c.world.num_videos
          << ";elen=" << c.world.min_event_len << "," << c.world.max_event_len
          << ";objs=" << c.world.min_objects << "," << c.world.max_objects;
    } else if (name == "clean") {
        chain("gen-world");
        s << "held=" << fmt_double(c.held_out_fraction);
    } else if (name == "chunk-subset") {
        chain("clean");
        s << "chunk=" << c.chunk_len << ";keep=" << c.keep_every;
    } else if (name == "train-baseline") {
        chain("chunk-subset");
        s << "patch=" << c.model.patch << ";T=" << c.model.frames_per_clip
          << ";dv=" << c.model.d_v << ";dt=" << c.model.d_t
          << ";d=" << c.model.d << ";vl=" << c.model.video_layers
          << ";tl=" << c.model.text_layers << ";h=" << c.model.heads
          << ";ff=" << c.model.ff_mult << ";L=" << c.model.max_text_len
          << ";bl=" << c.training.batch_labeled
          << ";ep=" << c.training.epochs
          << ";lr=" << fmt_double(c.training.lr)
          << ";tn=" << fmt_double(c.training.tau_n);
    } else if (name == "train-narrator") {
        chain("train-baseline");
        const auto& n = c.narrator;
        s << "dt=" << n.d_t << ";lml=" << n.lm_layers << ";h=" << n.heads
          << ";ff=" << n.ff_mult << ";q=" << n.num_queries
          << ";ph=" << n.pool_heads << ";pd=" << n.pool_dim
          << ";per=" << n.insertion_period << ";lme=" << n.lm_epochs
          << ";ade=" << n.adapter_epochs << ";lmlr=" << fmt_double(n.lm_lr)
          << ";adlr=" << fmt_double(n.adapter_lr)
          << ";held=" << fmt_double(n.held_out_fraction);
    } else if (name == "cache-narrations") {
        chain("train-narrator");
        s << "strategy=" << to_string(c.decoding.strategy)
          << ";p=" << fmt_double(c.decoding.p)
          << ";K=" << c.decoding.num_candidates
          << ";B=" << c.decoding.beam_width << ";G=" << c.decoding.groups
          << ";lam=" << fmt_double(c.decoding.diversity_penalty)
          << ";maxlen=" << c.decoding.max_len
          << ";thr=" << fmt_double(c.narrator.filter_threshold);
    } else if (name == "rephrase") {
        chain("chunk-subset");
        s << "maxc=" << c.rephrase_max_candidates;
    } else if (name == "train-lavila") {
        chain("cache-narrations");
        chain("rephrase");
        s << "bl=" << c.training.batch_labeled
          << ";bu=" << c.training.batch_unlabeled
          << ";ep=" << c.training.epochs
          << ";lr=" << fmt_double(c.training.lr)
          << ";tr=" << fmt_double(c.training.tau_r)
          << ";tn=" << fmt_double(c.training.tau_n)
          << ";coin=" << fmt_double(c.training.rephrase_prob) << ";arms=";
        for (const auto& arm : c.training.arms) s << arm << ",";
    } else if (name == "eval") {
        chain("train-lavila");
        s << "probe=" << c.evaluation.probe << ";mcq=" << c.evaluation.mcq
          << ";zs=" << c.evaluation.zero_shot;
    } else {
        throw ConfigError("unknown stage: " + name);
    }
    return fnv1a(s.str());
}

std::string Pipeline::marker_path(const std::string& name) const {
    return artifact(".stage-" + name);
}

bool Pipeline::stage_complete(const std::string& name) const {
    std::ifstream in(marker_path(name));
    if (!in) return false;
    std::string stored;
    std::getline(in, stored);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(stage_checksum(name)));
    if (trim(stored) != buf) return false;
    for (const auto& out : stage_outputs(name))
        if (!std::filesystem::exists(artifact(out))) return false;
    return true;
}

std::vector<StageStatus> Pipeline::plan() const {
    std::vector<StageStatus> statuses;
    for (const auto& name : kStageOrder) {
        StageStatus st;
        st.name = name;
        st.will_skip = stage_complete(name);
        st.outputs = stage_outputs(name);
        statuses.push_back(std::move(st));
    }
    return statuses;
}

std::vector<std::string> Pipeline::run(bool force) {
    std::filesystem::create_directories(root_);
    std::vector<std::string> executed;
    for (const auto& name : kStageOrder) {
        if (!force && stage_complete(name)) continue;
        run_stage(name);
        executed.push_back(name);
    }
    return executed;
}

void Pipeline::run_stage(const std::string& name) {
    if (std::find(kStageOrder.begin(), kStageOrder.end(), name) ==
        kStageOrder.end())
        throw ConfigError("unknown stage: " + name);
    std::filesystem::create_directories(root_);
    try {
        execute(name);
    } catch (const std::exception& e) {
        throw StageError("stage " + name + " failed: " + e.what() +
                         "; completed artifacts remain under " + root_);
    }
    std::ofstream marker = open_out(marker_path(name));
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(stage_checksum(name)));
    marker << buf << "\n";
}

void Pipeline::execute(const std::string& name) {
    if (name == "gen-world") return stage_gen_world();
    if (name == "clean") return stage_clean();
    if (name == "chunk-subset") return stage_chunk_subset();
    if (name == "train-baseline") return stage_train_baseline();
    if (name == "train-narrator") return stage_train_narrator();
    if (name == "cache-narrations") return stage_cache_narrations();
    if (name == "rephrase") return stage_rephrase();
    if (name == "train-lavila") return stage_train_lavila();
    if (name == "eval") return stage_eval();
    throw ConfigError("unknown stage: " + name);
}

void Pipeline::stage_gen_world() {
    std::vector<VideoRecord> videos = generate_world(cfg_.world_config());
    Grammar grammar(cfg_.world.num_shapes);
    std::vector<ClipAnnotation> raw =
        ground_truth_annotations(videos, grammar);
    save_videos(artifact("videos.jsonl"), videos);
    save_annotations(artifact("annotations_raw.jsonl"), raw);
}

void Pipeline::stage_clean() {
    std::vector<ClipAnnotation> raw =
        load_annotations(artifact("annotations_raw.jsonl"));
    std::vector<ClipAnnotation> cleaned = clean_narrations(raw);
    Rng root(cfg_.seed);
    auto split =
        split_annotations(cleaned, cfg_.held_out_fraction, root.fork("split"));
    save_annotations(artifact("annotations.jsonl"), cleaned);
    save_annotations(artifact("train.jsonl"), split.first);
    save_annotations(artifact("held.jsonl"), split.second);
}

void Pipeline::stage_chunk_subset() {
    std::vector<VideoRecord> videos = load_videos(artifact("videos.jsonl"));
    std::vector<ClipAnnotation> train =
        load_annotations(artifact("train.jsonl"));
    std::vector<ClipAnnotation> labeled;
    std::vector<ClipAnnotation> unlabeled;
    if (cfg_.keep_every <= 1) {
        labeled = train;
        ClipSampler sampler = make_clip_sampler(train);
        for (const auto& video : videos) {
            for (auto [t, e] :
                 sample_pseudo_intervals(video, train, sampler)) {
                ClipAnnotation clip;
                clip.video_id = video.id;
                clip.t = t;
                clip.e = e;
                clip.provenance = Provenance::Narrated;
                unlabeled.push_back(std::move(clip));
            }
        }
    } else {
        Rng root(cfg_.seed);
        ChunkSubsetResult res = chunk_subset(videos, train, cfg_.chunk_len,
                                             cfg_.keep_every,
                                             root.fork("chunk"));
        labeled = std::move(res.kept);
        unlabeled = std::move(res.sampled);
    }
    save_annotations(artifact("labeled.jsonl"), labeled);
    save_annotations(artifact("unlabeled.jsonl"), unlabeled);
}

void Pipeline::stage_train_baseline() {
    std::vector<VideoRecord> videos = load_videos(artifact("videos.jsonl"));
    std::vector<ClipAnnotation> labeled =
        load_annotations(artifact("labeled.jsonl"));
    Grammar grammar(cfg_.world.num_shapes);
    Rng root(cfg_.seed);
    Rng enc_rng = root.fork("encoder");
    DualEncoder encoder(cfg_.encoder_config(grammar), enc_rng);
    FunctionCandidates gt = ground_truth_source(grammar);
    TrainConfig tc = cfg_.train_config();
    // Pure ground-truth arm: every pair is a narrated original at tau_n.
    tc.rephrase_prob = 0.0;
    tc.seed = root.fork("train").seed();
    tc.log_path = artifact("log_baseline.jsonl");
    pretrain_dual_encoder(encoder, videos, labeled, {}, gt, gt, tc);
    save_checkpoint(artifact("baseline.ckpt"), encoder.params(),
                    "dual_encoder", cfg_.seed);
}

DualEncoder Pipeline::load_encoder(const std::string& ckpt) const {
    Grammar grammar(cfg_.world.num_shapes);
    Rng rng(0);
    DualEncoder encoder(cfg_.encoder_config(grammar), rng);
    load_checkpoint(ckpt, encoder.params(), "dual_encoder");
    return encoder;
}

void Pipeline::stage_train_narrator() {
    std::vector<VideoRecord> videos = load_videos(artifact("videos.jsonl"));
    std::vector<ClipAnnotation> labeled =
        load_annotations(artifact("labeled.jsonl"));
    Grammar grammar(cfg_.world.num_shapes);
    DualEncoder encoder = load_encoder(artifact("baseline.ckpt"));
    Rng root(cfg_.seed);
    Rng nar_rng = root.fork("narrator");
    Narrator narrator(cfg_.narrator_config(grammar), nar_rng);
    NarratorTrainConfig ntc = cfg_.narrator_train_config();
    ntc.seed = root.fork("narrator_train").seed();
    NarratorTrainResult result =
        train_narrator(narrator, encoder, videos, labeled, grammar, ntc);
    save_checkpoint(artifact("narrator.ckpt"), narrator.params(), "narrator",
                    cfg_.seed);
    nlohmann::json j{{"lm_losses", result.lm_losses},
                     {"held_out_perplexity", result.held_out_perplexity},
                     {"held_out_accuracy", result.held_out_accuracy},
                     {"selected_epoch", result.selected_epoch},
                     {"unconditional_perplexity",
                      result.unconditional_perplexity}};
    std::ofstream out = open_out(artifact("narrator_metrics.json"));
    out << j.dump(2) << "\n";
}

void Pipeline::stage_cache_narrations() {
    std::vector<VideoRecord> videos = load_videos(artifact("videos.jsonl"));
    std::vector<ClipAnnotation> labeled =
        load_annotations(artifact("labeled.jsonl"));
    std::vector<ClipAnnotation> unlabeled =
        load_annotations(artifact("unlabeled.jsonl"));
    Grammar grammar(cfg_.world.num_shapes);
    DualEncoder encoder = load_encoder(artifact("baseline.ckpt"));
    Rng nar_init(0);
    Narrator narrator(cfg_.narrator_config(grammar), nar_init);
    load_checkpoint(artifact("narrator.ckpt"), narrator.params(), "narrator");

    auto index = video_index(videos);
    CandidateFilter keep{FilterMode::Threshold,
                         cfg_.narrator.filter_threshold, 0};
    CandidateFilter top1{FilterMode::TopK, 0.0, 1};
    Rng root(cfg_.seed);
    std::vector<ClipAnnotation> rows;
    uint64_t clip_index = 0;
    auto cache_clip = [&](const ClipAnnotation& clip, bool is_labeled) {
        const VideoRecord& video = video_for(index, clip.video_id);
        ClipFrames frames = clip_byte_frames(video, clip.t, clip.e,
                                             cfg_.model.frames_per_clip);
        Mat feats = encoder.encode_video(frames).pre_pool->value;
        Rng nrng = root.fork("narrate", clip_index++);
        std::vector<std::vector<int>> cands =
            narrator.narrate(feats, cfg_.decoding, nrng);
        cands.erase(std::remove_if(cands.begin(), cands.end(),
                                   [](const std::vector<int>& t) {
                                       return t.empty();
                                   }),
                    cands.end());
        std::vector<ScoredCandidate> kept;
        if (!cands.empty()) {
            kept = filter_candidates(encoder, frames, cands, keep);
            // A labeled clip must stay usable, so the best candidate
            // survives even when nothing clears the threshold.
            if (kept.empty() && is_labeled)
                kept = filter_candidates(encoder, frames, cands, top1);
        }
        if (kept.empty() && is_labeled && !clip.narration.empty()) {
            ClipAnnotation row = clip;
            row.provenance = Provenance::Narrated;
            row.has_score = false;
            row.score = 0.0;
            rows.push_back(std::move(row));
            return;
        }
        for (const auto& cand : kept) {
            ClipAnnotation row;
            row.video_id = clip.video_id;
            row.t = clip.t;
            row.e = clip.e;
            row.narration =
                Grammar::join_tokens(grammar.decode(cand.tokens));
            row.provenance = Provenance::Narrated;
            row.score = cand.score;
            row.has_score = true;
            rows.push_back(std::move(row));
        }
    };
    for (const auto& clip : labeled) cache_clip(clip, true);
    for (const auto& clip : unlabeled) cache_clip(clip, false);
    save_annotations(artifact("narrated.jsonl"), rows);
}

void Pipeline::stage_rephrase() {
    std::vector<ClipAnnotation> labeled =
        load_annotations(artifact("labeled.jsonl"));
    Grammar grammar(cfg_.world.num_shapes);
    RephraserConfig rcfg{cfg_.rephrase_max_candidates};
    std::vector<ClipAnnotation> rows;
    for (const auto& clip : labeled) {
        // The original surface stays in the cache as the identity candidate,
        // so coin-flip batches keep seeing the narration form the retrieval
        // queries are written in.
        std::vector<std::string> cands = {clip.narration};
        for (const auto& cand : rephrase(clip.narration, grammar, rcfg)) {
            cands.push_back(cand);
        }
        for (const auto& cand : cands) {
            ClipAnnotation row;
            row.video_id = clip.video_id;
            row.t = clip.t;
            row.e = clip.e;
            row.narration = cand;
            row.provenance = Provenance::Rephrased;
            rows.push_back(std::move(row));
        }
    }
    save_annotations(artifact("rephrased.jsonl"), rows);
}

void Pipeline::stage_train_lavila() {
    std::vector<VideoRecord> videos = load_videos(artifact("videos.jsonl"));
    std::vector<ClipAnnotation> labeled =
        load_annotations(artifact("labeled.jsonl"));
    std::vector<ClipAnnotation> unlabeled =
        load_annotations(artifact("unlabeled.jsonl"));
    Grammar grammar(cfg_.world.num_shapes);
    CachedCandidates narrated = build_candidate_cache(
        load_annotations(artifact("narrated.jsonl")), grammar);
    CachedCandidates rephrased = build_candidate_cache(
        load_annotations(artifact("rephrased.jsonl")), grammar);
    FunctionCandidates gt = ground_truth_source(grammar);

    // Unlabeled clips whose candidates were all filtered away drop out.
    std::vector<ClipAnnotation> usable_unlabeled;
    for (const auto& clip : unlabeled)
        if (!narrated.candidates(clip).empty())
            usable_unlabeled.push_back(clip);

    const std::vector<ClipAnnotation> no_unlabeled;
    for (const auto& arm : cfg_.training.arms) {
        if (arm == "baseline") continue;
        const CandidateSource* reph = nullptr;
        const CandidateSource* narr = nullptr;
        const std::vector<ClipAnnotation>* unlab = &no_unlabeled;
        if (arm == "rephraser") {
            reph = &rephrased;
            narr = &gt;
        } else if (arm == "recaption") {
            reph = &gt;
            narr = &narrated;
        } else if (arm == "all") {
            reph = &rephrased;
            narr = &narrated;
            unlab = &usable_unlabeled;
        } else {
            throw ConfigError("unknown arm in training.arms: '" + arm + "'");
        }
        Rng root(cfg_.seed);
        Rng enc_rng = root.fork("encoder");
        DualEncoder encoder(cfg_.encoder_config(grammar), enc_rng);
        TrainConfig tc = cfg_.train_config();
        tc.seed = root.fork("train").seed();
        tc.log_path = artifact("log_arm_" + arm + ".jsonl");
        pretrain_dual_encoder(encoder, videos, labeled, *unlab, *reph, *narr,
                              tc);
        save_checkpoint(artifact("arm_" + arm + ".ckpt"), encoder.params(),
                        "dual_encoder", cfg_.seed);
    }
}

void Pipeline::stage_eval() {
    std::vector<VideoRecord> videos = load_videos(artifact("videos.jsonl"));
    std::vector<ClipAnnotation> train =
        load_annotations(artifact("train.jsonl"));
    std::vector<ClipAnnotation> held =
        load_annotations(artifact("held.jsonl"));
    Grammar grammar(cfg_.world.num_shapes);
    std::vector<MCQItem> items;
    if (cfg_.evaluation.mcq)
        items = build_mcq_items(videos, held, grammar,
                                cfg_.model.frames_per_clip,
                                Rng(cfg_.seed).fork("mcq"));
    std::ofstream arms_out = open_out(artifact("arms.csv"));
    arms_out << "arm,metric,split,value,seed\n";
    for (const auto& arm : cfg_.training.arms) {
        DualEncoder encoder = load_encoder(arm_checkpoint(arm));
        MetricReport report = evaluate_encoder(encoder, videos, train, held,
                                               grammar, cfg_, items);
        save_metric_csv(artifact("report_" + arm + ".csv"), report);
        save_metric_json(artifact("report_" + arm + ".json"), report);
        for (const auto& row : report.rows)
            arms_out << arm << "," << row.metric << "," << row.split << ","
                     << fmt_fixed(row.value) << "," << row.seed << "\n";
    }
}

std::vector<std::string> run_pipeline(const ExperimentConfig& cfg,
                                      bool force) {
    Pipeline pipeline(cfg);
    return pipeline.run(force);
}

Mat embed_clips(const DualEncoder& encoder,
                const std::vector<VideoRecord>& videos,
                const std::vector<ClipAnnotation>& clips,
                int frames_per_clip) {
    auto index = video_index(videos);
    Mat out(static_cast<int>(clips.size()), encoder.config().d);
    const int chunk = 16;
    for (size_t start = 0; start < clips.size(); start += chunk) {
        size_t stop = std::min(clips.size(), start + chunk);
        std::vector<ClipFrames> batch;
        for (size_t i = start; i < stop; ++i)
            batch.push_back(clip_byte_frames(
                video_for(index, clips[i].video_id), clips[i].t, clips[i].e,
                frames_per_clip));
        Mat emb = encoder.encode_video_batch(batch)->value;
        out.middleRows(static_cast<int>(start), emb.rows()) = emb;
    }
    return out;
}

namespace {

Mat embed_texts(const DualEncoder& encoder,
                const std::vector<std::vector<int>>& texts) {
    Mat out(static_cast<int>(texts.size()), encoder.config().d);
    const size_t chunk = 32;
    for (size_t start = 0; start < texts.size(); start += chunk) {
        size_t stop = std::min(texts.size(), start + chunk);
        std::vector<std::vector<int>> batch(texts.begin() + start,
                                            texts.begin() + stop);
        Mat emb = encoder.encode_text_batch(batch)->value;
        out.middleRows(static_cast<int>(start), emb.rows()) = emb;
    }
    return out;
}

std::vector<std::string> narration_strings(
    const std::vector<ClipAnnotation>& clips) {
    std::vector<std::string> out;
    out.reserve(clips.size());
    for (const auto& clip : clips) out.push_back(clip.narration);
    return out;
}

} // namespace

std::vector<MCQItem> build_mcq_items(
    const std::vector<VideoRecord>& videos,
    const std::vector<ClipAnnotation>& held_split, const Grammar& grammar,
    int frames_per_clip, Rng rng) {
    auto index = video_index(videos);
    size_t n = held_split.size();
    std::vector<int> classes(n);
    std::vector<std::vector<int>> tokens(n);
    for (size_t i = 0; i < n; ++i) {
        std::vector<std::string> words =
            Grammar::split_tokens(held_split[i].narration);
        classes[i] = grammar.event_class(grammar.parse(words));
        tokens[i] = grammar.encode(words);
    }
    std::vector<MCQItem> items;
    auto make_item = [&](size_t i, std::vector<int> pool, bool intra) {
        if (pool.size() < 4) return;
        rng.shuffle(pool);
        pool.resize(4);
        int correct = rng.uniform_int(0, 5);
        MCQItem item;
        item.frames = clip_byte_frames(
            video_for(index, held_split[i].video_id), held_split[i].t,
            held_split[i].e, frames_per_clip);
        int next = 0;
        for (int slot = 0; slot < 5; ++slot) {
            if (slot == correct)
                item.candidates.push_back(tokens[i]);
            else
                item.candidates.push_back(tokens[pool[next++]]);
        }
        item.correct = correct;
        item.intra_video = intra;
        items.push_back(std::move(item));
    };
    for (size_t i = 0; i < n; ++i) {
        std::vector<int> inter_pool;
        std::vector<int> intra_pool;
        for (size_t j = 0; j < n; ++j) {
            if (j == i || classes[j] == classes[i]) continue;
            inter_pool.push_back(static_cast<int>(j));
            if (held_split[j].video_id == held_split[i].video_id)
                intra_pool.push_back(static_cast<int>(j));
        }
        make_item(i, inter_pool, false);
        make_item(i, intra_pool, true);
    }
    return items;
}

MetricReport evaluate_encoder(const DualEncoder& encoder,
                              const std::vector<VideoRecord>& videos,
                              const std::vector<ClipAnnotation>& train_split,
                              const std::vector<ClipAnnotation>& held_split,
                              const Grammar& grammar,
                              const ExperimentConfig& cfg,
                              const std::vector<MCQItem>& mcq_items) {
    if (held_split.empty()) throw DataError("empty held-out split");
    MetricReport report;
    uint64_t seed = cfg.seed;
    int frames = cfg.model.frames_per_clip;
    auto index = video_index(videos);

    std::vector<std::vector<int>> held_tokens;
    for (const auto& clip : held_split)
        held_tokens.push_back(
            grammar.encode(Grammar::split_tokens(clip.narration)));
    Mat v = embed_clips(encoder, videos, held_split, frames);
    Mat u = embed_texts(encoder, held_tokens);
    Mat s = similarity_matrix(v, u);
    std::vector<std::string> narrations = narration_strings(held_split);
    Eigen::MatrixXi rel = narration_relevance(narrations, narrations, grammar);
    DirectionalMetric map = retrieval_map(s, rel);
    DirectionalMetric ndcg = retrieval_ndcg(s, rel.cast<double>());
    report.add("map_v2t", "held", map.v2t, seed);
    report.add("map_t2v", "held", map.t2v, seed);
    report.add("map_avg", "held", map.average, seed);
    report.add("ndcg_v2t", "held", ndcg.v2t, seed);
    report.add("ndcg_t2v", "held", ndcg.t2v, seed);
    report.add("ndcg_avg", "held", ndcg.average, seed);

    if (cfg.evaluation.mcq && !mcq_items.empty()) {
        MCQResult mcq = mcq_accuracy(encoder, mcq_items);
        if (mcq.inter_count > 0)
            report.add("mcq_inter", "held", mcq.inter_accuracy, seed);
        if (mcq.intra_count > 0)
            report.add("mcq_intra", "held", mcq.intra_accuracy, seed);
    }

    if (cfg.evaluation.zero_shot) {
        std::set<int> class_set;
        std::vector<int> labels;
        for (const auto& clip : held_split) {
            int cls = grammar.event_class(
                grammar.parse(Grammar::split_tokens(clip.narration)));
            labels.push_back(cls);
            class_set.insert(cls);
        }
        std::vector<int> classes(class_set.begin(), class_set.end());
        std::vector<std::vector<int>> prompts;
        for (int cls : classes)
            prompts.push_back(
                grammar.encode(grammar.narrate(grammar.class_event(cls))));
        int hits = 0;
        for (size_t i = 0; i < held_split.size(); ++i) {
            ClipFrames f = clip_byte_frames(
                video_for(index, held_split[i].video_id), held_split[i].t,
                held_split[i].e, frames);
            int pred = zero_shot_classify(encoder, f, prompts);
            if (classes[static_cast<size_t>(pred)] == labels[i]) ++hits;
        }
        report.add("zero_shot_acc", "held",
                   static_cast<double>(hits) /
                       static_cast<double>(held_split.size()),
                   seed);
    }

    if (cfg.evaluation.probe) {
        auto direction_of = [&](const ClipAnnotation& clip) {
            return grammar.parse(Grammar::split_tokens(clip.narration))
                .direction;
        };
        std::vector<int> train_y, held_y;
        for (const auto& clip : train_split)
            train_y.push_back(direction_of(clip));
        for (const auto& clip : held_split)
            held_y.push_back(direction_of(clip));
        Mat train_x = embed_clips(encoder, videos, train_split, frames);
        ProbeResult probe = linear_probe(train_x, train_y, v, held_y);
        report.add("probe_acc", "held", probe.best_accuracy, seed);
        report.add("probe_best_c", "held", probe.best_c, seed);
    }
    return report;
}

namespace {

double read_map_avg(const std::string& report_csv) {
    return load_metric_csv(report_csv).get("map_avg");
}

ExperimentConfig sweep_cell_config(const ExperimentConfig& base, int fraction,
                                   uint64_t seed, const std::string& subdir) {
    ExperimentConfig sub = base;
    sub.seed = seed;
    sub.keep_every = fraction;
    sub.training.arms = {"baseline", "all"};
    sub.evaluation.probe = false;
    sub.evaluation.mcq = false;
    sub.evaluation.zero_shot = false;
    sub.out_dir = base.out_dir + "/" + subdir;
    return sub;
}

} // namespace

SweepOutcome run_semi_sup_sweep(const ExperimentConfig& cfg,
                                const SweepOptions& opt) {
    static const std::set<int> allowed = {1, 2, 5, 10};
    if (opt.fractions.empty())
        throw ConfigError("sweep needs at least one fraction");
    std::set<int> seen;
    for (int n : opt.fractions) {
        if (allowed.find(n) == allowed.end())
            throw ConfigError("sweep fraction denominators must come from "
                              "{1, 2, 5, 10}; got " + std::to_string(n));
        if (!seen.insert(n).second)
            throw ConfigError("duplicate sweep fraction: " +
                              std::to_string(n));
    }
    if (opt.seeds.empty()) throw ConfigError("sweep needs at least one seed");

    std::string root = resolve_out_dir(cfg.out_dir);
    std::string csv_path =
        opt.csv_path.empty()
            ? (std::filesystem::path(root) / "sweep.csv").string()
            : opt.csv_path;

    struct Cell {
        int fraction;
        uint64_t seed;
        double baseline_map;
        double lavila_map;
    };
    std::vector<Cell> cells;
    for (int n : opt.fractions) {
        for (uint64_t seed : opt.seeds) {
            ExperimentConfig sub = sweep_cell_config(
                cfg, n, seed,
                "sweep_n" + std::to_string(n) + "_s" + std::to_string(seed));
            Pipeline pipeline(sub);
            pipeline.run();
            Cell cell;
            cell.fraction = n;
            cell.seed = seed;
            cell.baseline_map =
                read_map_avg(pipeline.artifact("report_baseline.csv"));
            cell.lavila_map =
                read_map_avg(pipeline.artifact("report_all.csv"));
            cells.push_back(cell);
        }
    }

    std::ofstream out = open_out(csv_path);
    out << "fraction,arm,seed,map\n";
    for (const auto& cell : cells) {
        double fraction = 1.0 / cell.fraction;
        out << fmt_fixed(fraction) << ",baseline," << cell.seed << ","
            << fmt_fixed(cell.baseline_map) << "\n";
        out << fmt_fixed(fraction) << ",lavila," << cell.seed << ","
            << fmt_fixed(cell.lavila_map) << "\n";
    }
    out.close();

    SweepOutcome outcome;
    outcome.csv_path = csv_path;
    outcome.lavila_never_worse = true;
    for (int n : opt.fractions) {
        SweepFractionSummary summary;
        summary.fraction_denominator = n;
        int count = 0;
        for (const auto& cell : cells) {
            if (cell.fraction != n) continue;
            summary.baseline_mean += cell.baseline_map;
            summary.lavila_mean += cell.lavila_map;
            ++count;
        }
        summary.baseline_mean /= count;
        summary.lavila_mean /= count;
        if (summary.lavila_mean < summary.baseline_mean)
            outcome.lavila_never_worse = false;
        if (n == 2 && summary.lavila_mean > summary.baseline_mean)
            outcome.strict_gain_at_half = true;
        outcome.summaries.push_back(summary);
    }
    return outcome;
}

FinetuneOutcome run_finetune(const ExperimentConfig& cfg,
                             const std::string& arm) {
    Pipeline pipeline(cfg);
    std::vector<VideoRecord> videos =
        load_videos(pipeline.artifact("videos.jsonl"));
    std::vector<ClipAnnotation> labeled =
        load_annotations(pipeline.artifact("labeled.jsonl"));
    std::vector<ClipAnnotation> held =
        load_annotations(pipeline.artifact("held.jsonl"));
    Grammar grammar(cfg.world.num_shapes);
    Rng init(0);
    DualEncoder encoder(cfg.encoder_config(grammar), init);
    load_checkpoint(pipeline.arm_checkpoint(arm), encoder.params(),
                    "dual_encoder");

    auto held_map = [&]() {
        std::vector<std::vector<int>> tokens;
        for (const auto& clip : held)
            tokens.push_back(
                grammar.encode(Grammar::split_tokens(clip.narration)));
        Mat v = embed_clips(encoder, videos, held,
                            cfg.model.frames_per_clip);
        Mat u = embed_texts(encoder, tokens);
        std::vector<std::string> narrations = narration_strings(held);
        Eigen::MatrixXi rel =
            narration_relevance(narrations, narrations, grammar);
        return retrieval_map(similarity_matrix(v, u), rel).average;
    };

    FinetuneOutcome outcome;
    outcome.map_before = held_map();
    FinetuneConfig fc = cfg.finetune_config();
    fc.seed = Rng(cfg.seed).fork("finetune").seed();
    finetune_retrieval(encoder, videos, labeled, grammar, fc);
    outcome.map_after = held_map();

    outcome.checkpoint_path =
        pipeline.artifact("finetuned_" + arm + ".ckpt");
    save_checkpoint(outcome.checkpoint_path, encoder.params(), "dual_encoder",
                    cfg.seed);
    MetricReport report;
    report.add("map_avg_before", "held", outcome.map_before, cfg.seed);
    report.add("map_avg_after", "held", outcome.map_after, cfg.seed);
    outcome.csv_path = pipeline.artifact("finetune_" + arm + ".csv");
    save_metric_csv(outcome.csv_path, report);
    return outcome;
}

SamplingOutcome run_sampling_ablation(const ExperimentConfig& cfg,
                                      const std::vector<uint64_t>& seeds) {
    if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
    std::string root = resolve_out_dir(cfg.out_dir);
    std::string csv_path =
        (std::filesystem::path(root) / "sampling.csv").string();

    struct ModeSpec {
        const char* name;
        DecodeStrategy strategy;
    };
    const ModeSpec modes[] = {{"nucleus", DecodeStrategy::Nucleus},
                              {"beam", DecodeStrategy::Beam}};

    std::ofstream out = open_out(csv_path);
    out << "mode,seed,metric,value\n";
    double sums[2] = {0.0, 0.0};
    for (int mi = 0; mi < 2; ++mi) {
        const ModeSpec& mode = modes[mi];
        for (uint64_t seed : seeds) {
            ExperimentConfig sub = cfg;
            sub.seed = seed;
            sub.decoding.strategy = mode.strategy;
            if (mode.strategy == DecodeStrategy::Beam)
                sub.decoding.beam_width = std::max(
                    sub.decoding.beam_width, sub.decoding.num_candidates);
            sub.training.arms = {"baseline", "all"};
            sub.evaluation.probe = false;
            sub.evaluation.mcq = false;
            sub.evaluation.zero_shot = false;
            sub.out_dir = cfg.out_dir + "/sampling_" + mode.name + "_s" +
                          std::to_string(seed);
            Pipeline pipeline(sub);
            pipeline.run();
            double map = read_map_avg(pipeline.artifact("report_all.csv"));
            sums[mi] += map;
            out << mode.name << "," << seed << ",map_avg," << fmt_fixed(map)
                << "\n";

            // Caption quality of the kept candidate per held clip against
            // every surface form of the clip's event.
            Grammar grammar(sub.world.num_shapes);
            std::vector<VideoRecord> videos =
                load_videos(pipeline.artifact("videos.jsonl"));
            std::vector<ClipAnnotation> held =
                load_annotations(pipeline.artifact("held.jsonl"));
            Rng init(0);
            DualEncoder encoder(sub.encoder_config(grammar), init);
            load_checkpoint(pipeline.artifact("baseline.ckpt"),
                            encoder.params(), "dual_encoder");
            Narrator narrator(sub.narrator_config(grammar), init);
            load_checkpoint(pipeline.artifact("narrator.ckpt"),
                            narrator.params(), "narrator");
            auto index = video_index(videos);
            CandidateFilter top1{FilterMode::TopK, 0.0, 1};
            Rng root(seed);
            std::vector<std::vector<std::string>> cands;
            std::vector<std::vector<std::vector<std::string>>> refs;
            for (size_t i = 0; i < held.size(); ++i) {
                const auto& clip = held[i];
                ClipFrames frames = clip_byte_frames(
                    video_for(index, clip.video_id), clip.t, clip.e,
                    sub.model.frames_per_clip);
                Mat feats = encoder.encode_video(frames).pre_pool->value;
                Rng nrng = root.fork("ablate-narrate", i);
                auto raw = narrator.narrate(feats, sub.decoding, nrng);
                raw.erase(std::remove_if(raw.begin(), raw.end(),
                                         [](const std::vector<int>& t) {
                                             return t.empty();
                                         }),
                          raw.end());
                std::vector<std::string> best;
                if (!raw.empty()) {
                    auto kept = filter_candidates(encoder, frames, raw, top1);
                    best = grammar.decode(kept.front().tokens);
                }
                cands.push_back(best);
                Event event =
                    grammar.parse(Grammar::split_tokens(clip.narration));
                std::vector<std::vector<std::string>> clip_refs;
                clip_refs.push_back(grammar.narrate(event));
                for (auto& p : grammar.paraphrases(event))
                    clip_refs.push_back(std::move(p));
                refs.push_back(std::move(clip_refs));
            }
            CaptionScores scores = caption_metrics(cands, refs);
            out << mode.name << "," << seed << ",bleu4,"
                << fmt_fixed(scores.bleu4) << "\n";
            out << mode.name << "," << seed << ",rouge_l,"
                << fmt_fixed(scores.rouge_l) << "\n";
            out << mode.name << "," << seed << ",cider,"
                << fmt_fixed(scores.cider) << "\n";
        }
    }
    out.close();

    SamplingOutcome outcome;
    outcome.csv_path = csv_path;
    outcome.nucleus_map_mean = sums[0] / static_cast<double>(seeds.size());
    outcome.beam_map_mean = sums[1] / static_cast<double>(seeds.size());
    outcome.nucleus_at_least_beam =
        outcome.nucleus_map_mean >= outcome.beam_map_mean;
    return outcome;
}

std::vector<TempSetting> default_temperature_grid() {
    return {{0.04, 0.04}, {0.04, 0.10}, {0.07, 0.07}, {0.10, 0.04},
            {0.10, 0.10}};
}

TemperatureOutcome run_temperature_ablation(
    const ExperimentConfig& cfg, const std::vector<TempSetting>& grid,
    const std::vector<uint64_t>& seeds) {
    if (grid.empty()) throw ConfigError("ablation needs a temperature grid");
    if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
    std::string root = resolve_out_dir(cfg.out_dir);
    std::string csv_path =
        (std::filesystem::path(root) / "temperature.csv").string();
    std::ofstream out = open_out(csv_path);
    out << "tau_r,tau_n,seed,map\n";

    TemperatureOutcome outcome;
    outcome.csv_path = csv_path;
    outcome.best_map = -1.0;
    for (const auto& setting : grid) {
        double sum = 0.0;
        for (uint64_t seed : seeds) {
            ExperimentConfig sub = cfg;
            sub.seed = seed;
            sub.training.tau_r = setting.tau_r;
            sub.training.tau_n = setting.tau_n;
            sub.training.arms = {"all"};
            sub.evaluation.probe = false;
            sub.evaluation.mcq = false;
            sub.evaluation.zero_shot = false;
            sub.out_dir = cfg.out_dir + "/temp_r" + fmt_double(setting.tau_r) +
                          "_n" + fmt_double(setting.tau_n) + "_s" +
                          std::to_string(seed);
            Pipeline pipeline(sub);
            pipeline.run();
            double map = read_map_avg(pipeline.artifact("report_all.csv"));
            sum += map;
            out << fmt_double(setting.tau_r) << ","
                << fmt_double(setting.tau_n) << "," << seed << ","
                << fmt_fixed(map) << "\n";
        }
        double mean = sum / static_cast<double>(seeds.size());
        if (mean > outcome.best_map) {
            outcome.best_map = mean;
            outcome.best = setting;
        }
    }
    return outcome;
}

} // namespace gridvl
