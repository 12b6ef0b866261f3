#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gridvl/grammar.hpp"
#include "gridvl/rng.hpp"
#include "gridvl/worlds.hpp"

namespace gridvl {

enum class Provenance { GroundTruth, Rephrased, Narrated };

std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& s); // throws ParseError

// One narration attached to a clip interval [t, e) of a video. The narration
// is a whitespace-joined token string; score is the dual-encoder similarity
// assigned by the candidate filter (absent until filtering).
struct ClipAnnotation {
    std::string video_id;
    int t = 0;
    int e = 0;
    std::string narration;
    Provenance provenance = Provenance::GroundTruth;
    double score = 0.0;
    bool has_score = false;

    bool operator==(const ClipAnnotation& o) const {
        return video_id == o.video_id && t == o.t && e == o.e &&
               narration == o.narration && provenance == o.provenance &&
               has_score == o.has_score && (!has_score || score == o.score);
    }
};

std::vector<ClipAnnotation> ground_truth_annotations(
    const std::vector<VideoRecord>& videos, const Grammar& grammar);

// Keep rule: at least 4 tokens and no "#unsure" / "#Unsure" token.
bool narration_is_clean(const std::string& narration);
std::vector<ClipAnnotation> clean_narrations(
    const std::vector<ClipAnnotation>& annotations);

// Mean of (e - t) over annotations; throws DomainError when empty.
double average_clip_duration(const std::vector<ClipAnnotation>& annotations);

// Pseudo-clip geometry: both the clip length and the tiling stride default to
// the mean ground-truth duration, rounded to whole frames (minimum 1).
struct ClipSampler {
    double delta = 0.0;
    double stride = 0.0;

    int frame_len() const;
    int frame_stride() const;
};

ClipSampler make_clip_sampler(const std::vector<ClipAnnotation>& annotations);

// Tiles every maximal unannotated gap of the video's timeline left to right;
// emitted intervals never overlap a ground-truth interval and runts shorter
// than the clip length are discarded.
std::vector<std::pair<int, int>> sample_pseudo_intervals(
    const VideoRecord& video, const std::vector<ClipAnnotation>& annotations,
    const ClipSampler& sampler);

// Semi-supervised subset protocol: timelines are cut into fixed-length
// chunks, annotations starting in every keep_every-th chunk survive, and
// each skipped chunk receives uniformly placed unlabeled intervals matching
// the kept chunks' mean clip count and length.
struct ChunkSubsetResult {
    std::vector<ClipAnnotation> kept;
    // Unlabeled intervals awaiting pseudo-captions (empty narration,
    // provenance Narrated).
    std::vector<ClipAnnotation> sampled;
};

ChunkSubsetResult chunk_subset(const std::vector<VideoRecord>& videos,
                               const std::vector<ClipAnnotation>& annotations,
                               int chunk_len, int keep_every, const Rng& rng);

// JSONL round trips. Annotation schema per line:
//   {"video_id", "t", "e", "narration", "provenance", "score"?}
// Malformed input raises ParseError naming the 1-based line.
void save_annotations(const std::string& path,
                      const std::vector<ClipAnnotation>& annotations);
std::vector<ClipAnnotation> load_annotations(const std::string& path);

void save_videos(const std::string& path,
                 const std::vector<VideoRecord>& videos);
std::vector<VideoRecord> load_videos(const std::string& path);

std::string base64_encode(const std::vector<uint8_t>& bytes);
std::vector<uint8_t> base64_decode(const std::string& text); // throws ParseError

} // namespace gridvl
