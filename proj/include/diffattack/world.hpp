#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffattack/rng.hpp"
#include "diffattack/tensor.hpp"

namespace diffattack {

inline constexpr int kDatasetVersion = 1;

/// Synthetic speaker world. Observed frames are x = (I + G_s) xbar0 + b_s + obs_noise z with
/// speaker-independent content averages xbar0 = W_c c.
struct WorldConfig {
    std::size_t n_speakers = 10;
    std::size_t feature_dim = 16;
    std::size_t content_dim = 4;
    double offset_scale = 1.0;
    double warp_strength = 0.1;
    double obs_noise = 0.05;
    std::size_t frames_per_utterance = 4;
    std::uint64_t seed = 0;

    void validate() const;
};

void to_json(nlohmann::json& j, const WorldConfig& c);
void from_json(const nlohmann::json& j, WorldConfig& c);

struct Speaker {
    std::size_t id = 0;
    Tensor offset;  // b_s, [d]
    Tensor warp;    // G_s, [d, d]
};

struct World {
    WorldConfig config;
    Tensor content_projection;  // W_c, [d, k], unit-norm columns
    std::vector<Speaker> speakers;

    std::size_t feature_dim() const { return config.feature_dim; }
    std::size_t n_speakers() const { return speakers.size(); }
    const Speaker& speaker(std::size_t id) const;

    /// Renders frames for the given content rows [n, k]; returns x [n, d].
    Tensor render(std::size_t speaker_id, const Tensor& content, Rng& rng) const;
    Tensor averages(const Tensor& content) const;

    /// Hash of the serialized world header; stamps every artifact derived from this world.
    std::string fingerprint() const;
};

struct Utterance {
    std::size_t speaker_id = 0;
    Tensor x;        // [frames, d]
    Tensor xbar0;    // [frames, d]
    Tensor content;  // [frames, k]

    std::size_t frames() const { return x.rows(); }
};

struct Dataset {
    World world;
    std::vector<Utterance> train;
    std::vector<Utterance> test;
    double split = 0.8;
};

World generate_world(const WorldConfig& cfg);
Utterance synth_utterance(const World& world, std::size_t speaker_id, Rng& rng);

/// Per-speaker stratified split: round(split * n) train utterances, the rest test.
Dataset make_dataset(const World& world, std::size_t utterances_per_speaker, double split, Rng& rng);

/// Frames of a set of utterances stacked row-wise, with their speaker labels.
struct FrameSet {
    Tensor x;
    Tensor xbar0;
    std::vector<std::size_t> labels;
};
FrameSet flatten(const std::vector<Utterance>& utts);

nlohmann::json world_header(const World& world, double split);
std::string serialize_dataset(const Dataset& ds);
Dataset parse_dataset(const std::string& text);
void save_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& path);

/// %.17g rendering; parses back to the identical double.
std::string format_double(double v);

}  // namespace diffattack
