#include "gridvl/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <json.hpp>

#include "gridvl/errors.hpp"

namespace gridvl {

using nlohmann::json;

std::string to_string(Provenance p) {
    switch (p) {
        case Provenance::GroundTruth: return "ground-truth";
        case Provenance::Rephrased: return "rephrased";
        case Provenance::Narrated: return "narrated";
    }
    throw DomainError("unknown provenance value");
}

Provenance provenance_from_string(const std::string& s) {
    if (s == "ground-truth") return Provenance::GroundTruth;
    if (s == "rephrased") return Provenance::Rephrased;
    if (s == "narrated") return Provenance::Narrated;
    throw ParseError("unknown provenance: '" + s + "'");
}

std::vector<ClipAnnotation> ground_truth_annotations(
    const std::vector<VideoRecord>& videos, const Grammar& grammar) {
    std::vector<ClipAnnotation> out;
    for (const auto& video : videos) {
        for (const auto& te : video.events) {
            ClipAnnotation a;
            a.video_id = video.id;
            a.t = te.t;
            a.e = te.e;
            a.narration = Grammar::join_tokens(grammar.narrate(te.event));
            a.provenance = Provenance::GroundTruth;
            out.push_back(std::move(a));
        }
    }
    return out;
}

bool narration_is_clean(const std::string& narration) {
    auto tokens = Grammar::split_tokens(narration);
    if (tokens.size() < 4) {
        return false;
    }
    for (const auto& t : tokens) {
        if (t == "#unsure" || t == "#Unsure") {
            return false;
        }
    }
    return true;
}

std::vector<ClipAnnotation> clean_narrations(
    const std::vector<ClipAnnotation>& annotations) {
    std::vector<ClipAnnotation> out;
    out.reserve(annotations.size());
    for (const auto& a : annotations) {
        if (narration_is_clean(a.narration)) {
            out.push_back(a);
        }
    }
    return out;
}

double average_clip_duration(const std::vector<ClipAnnotation>& annotations) {
    if (annotations.empty()) {
        throw DomainError("average_clip_duration: no annotations");
    }
    double sum = 0.0;
    for (const auto& a : annotations) {
        sum += a.e - a.t;
    }
    return sum / static_cast<double>(annotations.size());
}

int ClipSampler::frame_len() const {
    return std::max(1, static_cast<int>(std::lround(delta)));
}

int ClipSampler::frame_stride() const {
    return std::max(1, static_cast<int>(std::lround(stride)));
}

ClipSampler make_clip_sampler(const std::vector<ClipAnnotation>& annotations) {
    double delta = average_clip_duration(annotations);
    return ClipSampler{delta, delta};
}

std::vector<std::pair<int, int>> sample_pseudo_intervals(
    const VideoRecord& video, const std::vector<ClipAnnotation>& annotations,
    const ClipSampler& sampler) {
    // Merge the video's ground-truth intervals into a sorted disjoint union.
    std::vector<std::pair<int, int>> gt;
    for (const auto& a : annotations) {
        if (a.video_id == video.id) {
            gt.emplace_back(a.t, a.e);
        }
    }
    std::sort(gt.begin(), gt.end());
    std::vector<std::pair<int, int>> merged;
    for (const auto& iv : gt) {
        if (!merged.empty() && iv.first <= merged.back().second) {
            merged.back().second = std::max(merged.back().second, iv.second);
        } else {
            merged.push_back(iv);
        }
    }
    const int len = sampler.frame_len();
    const int stride = sampler.frame_stride();
    std::vector<std::pair<int, int>> out;
    int gap_start = 0;
    auto tile_gap = [&](int a, int b) {
        for (int s = a; s + len <= b; s += stride) {
            out.emplace_back(s, s + len);
        }
    };
    for (const auto& iv : merged) {
        tile_gap(gap_start, iv.first);
        gap_start = iv.second;
    }
    tile_gap(gap_start, video.length);
    return out;
}

ChunkSubsetResult chunk_subset(const std::vector<VideoRecord>& videos,
                               const std::vector<ClipAnnotation>& annotations,
                               int chunk_len, int keep_every, const Rng& rng) {
    if (chunk_len <= 0 || keep_every <= 0) {
        throw ConfigError("chunk_subset: chunk_len and keep_every must be positive");
    }
    ChunkSubsetResult result;
    if (keep_every == 1) {
        result.kept = annotations;
        return result;
    }
    std::map<std::string, int> video_length;
    for (const auto& v : videos) {
        video_length[v.id] = v.length;
    }
    // Pass 1: keep annotations starting in chunks 0, N, 2N, ... and gather
    // per-kept-chunk statistics.
    std::map<std::pair<std::string, int>, int> kept_chunk_clip_count;
    long kept_len_sum = 0;
    for (const auto& a : annotations) {
        int chunk = a.t / chunk_len;
        if (chunk % keep_every == 0) {
            result.kept.push_back(a);
            ++kept_chunk_clip_count[{a.video_id, chunk}];
            kept_len_sum += a.e - a.t;
        }
    }
    if (result.kept.empty()) {
        return result;
    }
    double mean_count = static_cast<double>(result.kept.size()) /
                        static_cast<double>(kept_chunk_clip_count.size());
    int per_chunk = std::max(1, static_cast<int>(std::lround(mean_count)));
    int clip_len = std::max(
        1, static_cast<int>(std::lround(
               static_cast<double>(kept_len_sum) /
               static_cast<double>(result.kept.size()))));
    // Pass 2: every skipped chunk gets per_chunk uniform intervals of
    // clip_len, clamped inside the chunk and the video.
    for (const auto& v : videos) {
        int num_chunks = (v.length + chunk_len - 1) / chunk_len;
        for (int chunk = 0; chunk < num_chunks; ++chunk) {
            if (chunk % keep_every == 0) {
                continue;
            }
            Rng chunk_rng = rng.fork(v.id, static_cast<uint64_t>(chunk));
            int lo = chunk * chunk_len;
            int hi = std::min(v.length, lo + chunk_len);
            int len = std::min(clip_len, hi - lo);
            if (len < 1) {
                continue;
            }
            for (int k = 0; k < per_chunk; ++k) {
                int start = lo + chunk_rng.uniform_int(0, hi - lo - len + 1);
                ClipAnnotation a;
                a.video_id = v.id;
                a.t = start;
                a.e = start + len;
                a.provenance = Provenance::Narrated;
                result.sampled.push_back(std::move(a));
            }
        }
    }
    return result;
}

namespace {

constexpr char kB64Alphabet[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int b64_value(char c) {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    throw ParseError("invalid base64 character");
}

json annotation_to_json(const ClipAnnotation& a) {
    json j;
    j["video_id"] = a.video_id;
    j["t"] = a.t;
    j["e"] = a.e;
    j["narration"] = a.narration;
    j["provenance"] = to_string(a.provenance);
    if (a.has_score) {
        j["score"] = a.score;
    }
    return j;
}

ClipAnnotation annotation_from_json(const json& j) {
    ClipAnnotation a;
    a.video_id = j.at("video_id").get<std::string>();
    a.t = j.at("t").get<int>();
    a.e = j.at("e").get<int>();
    a.narration = j.at("narration").get<std::string>();
    a.provenance = provenance_from_string(j.at("provenance").get<std::string>());
    if (j.contains("score") && !j.at("score").is_null()) {
        a.score = j.at("score").get<double>();
        a.has_score = true;
    }
    if (a.t < 0 || a.e <= a.t) {
        throw ParseError("annotation interval out of order");
    }
    return a;
}

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot open for writing: " + path);
    }
    return out;
}

std::ifstream open_in(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open for reading: " + path);
    }
    return in;
}

} // namespace

std::string base64_encode(const std::vector<uint8_t>& bytes) {
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    size_t i = 0;
    while (i + 3 <= bytes.size()) {
        uint32_t n = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
        out += kB64Alphabet[(n >> 18) & 63];
        out += kB64Alphabet[(n >> 12) & 63];
        out += kB64Alphabet[(n >> 6) & 63];
        out += kB64Alphabet[n & 63];
        i += 3;
    }
    size_t rem = bytes.size() - i;
    if (rem == 1) {
        uint32_t n = bytes[i] << 16;
        out += kB64Alphabet[(n >> 18) & 63];
        out += kB64Alphabet[(n >> 12) & 63];
        out += "==";
    } else if (rem == 2) {
        uint32_t n = (bytes[i] << 16) | (bytes[i + 1] << 8);
        out += kB64Alphabet[(n >> 18) & 63];
        out += kB64Alphabet[(n >> 12) & 63];
        out += kB64Alphabet[(n >> 6) & 63];
        out += '=';
    }
    return out;
}

std::vector<uint8_t> base64_decode(const std::string& text) {
    if (text.size() % 4 != 0) {
        throw ParseError("base64 length must be a multiple of 4");
    }
    std::vector<uint8_t> out;
    out.reserve(text.size() / 4 * 3);
    for (size_t i = 0; i < text.size(); i += 4) {
        int pad = 0;
        uint32_t n = 0;
        for (int k = 0; k < 4; ++k) {
            char c = text[i + k];
            if (c == '=') {
                if (i + 4 != text.size() || k < 2) {
                    throw ParseError("misplaced base64 padding");
                }
                ++pad;
                n <<= 6;
            } else {
                if (pad > 0) {
                    throw ParseError("base64 data after padding");
                }
                n = (n << 6) | static_cast<uint32_t>(b64_value(c));
            }
        }
        out.push_back(static_cast<uint8_t>((n >> 16) & 0xFF));
        if (pad < 2) {
            out.push_back(static_cast<uint8_t>((n >> 8) & 0xFF));
        }
        if (pad < 1) {
            out.push_back(static_cast<uint8_t>(n & 0xFF));
        }
    }
    return out;
}

void save_annotations(const std::string& path,
                      const std::vector<ClipAnnotation>& annotations) {
    auto out = open_out(path);
    for (const auto& a : annotations) {
        out << annotation_to_json(a).dump() << '\n';
    }
}

std::vector<ClipAnnotation> load_annotations(const std::string& path) {
    auto in = open_in(path);
    std::vector<ClipAnnotation> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        try {
            out.push_back(annotation_from_json(json::parse(line)));
        } catch (const std::exception& e) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": " +
                             e.what());
        }
    }
    return out;
}

void save_videos(const std::string& path,
                 const std::vector<VideoRecord>& videos) {
    auto out = open_out(path);
    for (const auto& v : videos) {
        json j;
        j["id"] = v.id;
        j["grid_size"] = v.grid_size;
        j["channels"] = v.channels;
        j["length"] = v.length;
        json objs = json::array();
        for (const auto& o : v.objects) {
            objs.push_back({o.color, o.shape, o.row, o.col});
        }
        j["objects"] = std::move(objs);
        json events = json::array();
        for (const auto& te : v.events) {
            events.push_back({te.t, te.e, te.event.agent, te.event.action,
                              te.event.color, te.event.shape,
                              te.event.direction, te.object_index});
        }
        j["events"] = std::move(events);
        json frames = json::array();
        for (const auto& f : v.frames) {
            frames.push_back(base64_encode(f));
        }
        j["frames"] = std::move(frames);
        out << j.dump() << '\n';
    }
}

std::vector<VideoRecord> load_videos(const std::string& path) {
    auto in = open_in(path);
    std::vector<VideoRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        try {
            json j = json::parse(line);
            VideoRecord v;
            v.id = j.at("id").get<std::string>();
            v.grid_size = j.at("grid_size").get<int>();
            v.channels = j.at("channels").get<int>();
            v.length = j.at("length").get<int>();
            for (const auto& o : j.at("objects")) {
                v.objects.push_back(WorldObject{o.at(0).get<int>(),
                                                o.at(1).get<int>(),
                                                o.at(2).get<int>(),
                                                o.at(3).get<int>()});
            }
            for (const auto& te : j.at("events")) {
                TimedEvent ev;
                ev.t = te.at(0).get<int>();
                ev.e = te.at(1).get<int>();
                ev.event.agent = te.at(2).get<int>();
                ev.event.action = te.at(3).get<int>();
                ev.event.color = te.at(4).get<int>();
                ev.event.shape = te.at(5).get<int>();
                ev.event.direction = te.at(6).get<int>();
                ev.object_index = te.at(7).get<int>();
                v.events.push_back(ev);
            }
            const size_t frame_bytes =
                static_cast<size_t>(v.channels) * v.grid_size * v.grid_size;
            for (const auto& f : j.at("frames")) {
                auto bytes = base64_decode(f.get<std::string>());
                if (bytes.size() != frame_bytes) {
                    throw ParseError("frame byte count mismatch");
                }
                v.frames.push_back(std::move(bytes));
            }
            if (static_cast<int>(v.frames.size()) != v.length) {
                throw ParseError("frame count does not match declared length");
            }
            out.push_back(std::move(v));
        } catch (const std::exception& e) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": " +
                             e.what());
        }
    }
    return out;
}

} // namespace gridvl
