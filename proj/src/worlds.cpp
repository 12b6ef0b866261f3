#include "gridvl/worlds.hpp"

#include <cstdio>
#include <numeric>

#include "gridvl/errors.hpp"

namespace gridvl {

namespace {

// (drow, dcol) per direction id: left, right, up, down.
constexpr int kDRow[Grammar::kNumDirections] = {0, 0, -1, 1};
constexpr int kDCol[Grammar::kNumDirections] = {-1, 1, 0, 0};

int wrap(int x, int n) {
    return ((x % n) + n) % n;
}

VideoRecord generate_video(const WorldConfig& cfg, int index, Rng rng) {
    VideoRecord video;
    char name[16];
    std::snprintf(name, sizeof(name), "v%03d", index);
    video.id = name;
    video.grid_size = cfg.grid_size;
    video.channels = cfg.channels();
    video.length = cfg.video_length;

    // Objects: distinct (color, shape) pairs on distinct cells.
    std::vector<std::pair<int, int>> pairs;
    for (int c = 0; c < Grammar::kNumColors; ++c) {
        for (int s = 0; s < cfg.num_shapes; ++s) {
            pairs.emplace_back(c, s);
        }
    }
    rng.shuffle(pairs);
    std::vector<int> cells(cfg.grid_size * cfg.grid_size);
    std::iota(cells.begin(), cells.end(), 0);
    rng.shuffle(cells);
    int count = rng.uniform_int(cfg.min_objects, cfg.max_objects + 1);
    for (int j = 0; j < count; ++j) {
        WorldObject obj;
        obj.color = pairs[j].first;
        obj.shape = pairs[j].second;
        obj.row = cells[j] / cfg.grid_size;
        obj.col = cells[j] % cfg.grid_size;
        video.objects.push_back(obj);
    }

    // Timeline walk: each segment becomes an event with probability
    // event_rate, so coverage is event_rate in expectation and exact at 1.
    int t = 0;
    while (t < cfg.video_length) {
        int len = rng.uniform_int(cfg.min_event_len, cfg.max_event_len + 1);
        if (len > cfg.video_length - t) {
            len = cfg.video_length - t;
        }
        if (rng.uniform() < cfg.event_rate) {
            TimedEvent te;
            te.t = t;
            te.e = t + len;
            te.object_index = rng.uniform_int(0, count);
            te.event.agent = rng.uniform_int(0, Grammar::kNumAgents);
            te.event.action = rng.uniform_int(0, Grammar::kNumActions);
            te.event.color = video.objects[te.object_index].color;
            te.event.shape = video.objects[te.object_index].shape;
            te.event.direction = rng.uniform_int(0, Grammar::kNumDirections);
            video.events.push_back(te);
        }
        t += len;
    }

    // Render occupancy frames from the simulated positions.
    auto positions = object_positions(video);
    const int g = cfg.grid_size;
    const int plane = g * g;
    video.frames.assign(cfg.video_length,
                        std::vector<uint8_t>(video.channels * plane, 0));
    for (int f = 0; f < cfg.video_length; ++f) {
        auto& frame = video.frames[f];
        for (size_t j = 0; j < video.objects.size(); ++j) {
            auto [r, c] = positions[f][j];
            frame[video.objects[j].color * plane + r * g + c] = 1;
            frame[(Grammar::kNumColors + video.objects[j].shape) * plane +
                  r * g + c] = 1;
        }
        for (const auto& te : video.events) {
            if (te.t <= f && f < te.e) {
                auto [r, c] = positions[f][te.object_index];
                frame[(Grammar::kNumColors + cfg.num_shapes + te.event.agent) *
                          plane +
                      r * g + c] = 1;
            }
        }
    }
    return video;
}

} // namespace

void WorldConfig::validate() const {
    if (grid_size < 4) {
        throw ConfigError("world: grid_size must be >= 4");
    }
    if (num_shapes < 1 || num_shapes > 3) {
        throw ConfigError("world: num_shapes must be in [1, 3]");
    }
    if (video_length <= 0 || num_videos <= 0) {
        throw ConfigError("world: video_length and num_videos must be positive");
    }
    if (event_rate <= 0.0 || event_rate > 1.0) {
        throw ConfigError("world: event_rate must be in (0, 1]");
    }
    if (min_event_len < 1 || max_event_len < min_event_len) {
        throw ConfigError("world: event length bounds out of order");
    }
    if (min_objects < 1 || max_objects < min_objects ||
        max_objects > Grammar::kNumColors * num_shapes ||
        max_objects > grid_size * grid_size) {
        throw ConfigError("world: object count bounds out of range");
    }
}

std::vector<VideoRecord> generate_world(const WorldConfig& config) {
    config.validate();
    Rng root(config.seed);
    std::vector<VideoRecord> out;
    out.reserve(config.num_videos);
    for (int i = 0; i < config.num_videos; ++i) {
        out.push_back(generate_video(config, i, root.fork("video", i)));
    }
    return out;
}

std::vector<std::vector<std::pair<int, int>>> object_positions(
    const VideoRecord& video) {
    std::vector<std::vector<std::pair<int, int>>> positions(
        video.length,
        std::vector<std::pair<int, int>>(video.objects.size()));
    if (video.length == 0) {
        return positions;
    }
    for (size_t j = 0; j < video.objects.size(); ++j) {
        positions[0][j] = {video.objects[j].row, video.objects[j].col};
    }
    for (int f = 1; f < video.length; ++f) {
        positions[f] = positions[f - 1];
        for (const auto& te : video.events) {
            if (te.t < f && f < te.e) {
                bool advance = te.event.action == 0 || (f - te.t) % 2 == 0;
                if (advance) {
                    auto& [r, c] = positions[f][te.object_index];
                    r = wrap(r + kDRow[te.event.direction], video.grid_size);
                    c = wrap(c + kDCol[te.event.direction], video.grid_size);
                }
            }
        }
    }
    return positions;
}

Mat sample_clip_frames(const VideoRecord& video, int t, int e,
                       int frames_per_clip) {
    if (t < 0 || e <= t || e > video.length) {
        throw ShapeError("clip interval out of range");
    }
    if (frames_per_clip < 1) {
        throw ConfigError("frames_per_clip must be >= 1");
    }
    const int width = video.channels * video.grid_size * video.grid_size;
    Mat out(frames_per_clip, width);
    for (int k = 0; k < frames_per_clip; ++k) {
        int f = t + static_cast<int>(static_cast<long>(k) * (e - t) /
                                     frames_per_clip);
        const auto& frame = video.frames[f];
        for (int i = 0; i < width; ++i) {
            out(k, i) = static_cast<double>(frame[i]);
        }
    }
    return out;
}

} // namespace gridvl
