#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gridvl/autograd.hpp"
#include "gridvl/grammar.hpp"
#include "gridvl/rng.hpp"

namespace gridvl {

struct WorldConfig {
    int grid_size = 8;
    int num_shapes = 3;
    int video_length = 120; // frames; one frame is one second for chunking
    double event_rate = 0.55;
    int num_videos = 28;
    int min_event_len = 4;
    int max_event_len = 8;
    int min_objects = 2;
    int max_objects = 4;
    uint64_t seed = 0;

    void validate() const; // throws ConfigError
    int channels() const { return Grammar::kNumColors + num_shapes + Grammar::kNumAgents; }
};

struct WorldObject {
    int color = 0;
    int shape = 0;
    int row = 0; // initial cell
    int col = 0;
};

struct TimedEvent {
    int t = 0; // interval [t, e)
    int e = 0;
    Event event;
    int object_index = 0;
};

// A full synthetic video: dense occupancy frames plus the event script that
// produced them. Frames are 0/1 bytes laid out channel-major
// (channel * grid * grid + row * grid + col); channels are colors, then
// shapes, then agents, with the acting agent drawn at the object's cell only
// during its event interval.
struct VideoRecord {
    std::string id;
    int grid_size = 0;
    int channels = 0;
    int length = 0;
    std::vector<WorldObject> objects;
    std::vector<TimedEvent> events; // sorted by t, pairwise disjoint
    std::vector<std::vector<uint8_t>> frames;
};

// Procedurally builds the corpus. Deterministic in config.seed; event
// intervals tile [0, length) exactly when event_rate is 1.
std::vector<VideoRecord> generate_world(const WorldConfig& config);

// Motion rules shared by generation and by anyone replaying the script:
// "moves" advances one cell per frame, "pushes" one cell every second frame,
// both entering frames t+1 .. e-1 of the event, toroidal wrap.
// Returns positions[frame][object] = (row, col).
std::vector<std::vector<std::pair<int, int>>> object_positions(
    const VideoRecord& video);

// T frames sampled at t + floor(k*(e-t)/T) for k in [0,T), each flattened to
// one row of length channels*grid*grid.
Mat sample_clip_frames(const VideoRecord& video, int t, int e,
                       int frames_per_clip);

} // namespace gridvl
