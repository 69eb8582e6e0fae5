#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffattack/bench.hpp"
#include "diffattack/classifier.hpp"
#include "diffattack/decoder.hpp"
#include "diffattack/diffusion.hpp"
#include "diffattack/encoder.hpp"
#include "diffattack/pgd.hpp"
#include "diffattack/world.hpp"

namespace diffattack {

inline constexpr int kManifestVersion = 1;
inline constexpr int kAttackVersion = 1;

struct DatasetConfig {
    std::size_t utterances_per_speaker = 20;
    double split = 0.8;
};

struct VariantConfig {
    double w_spk = 1.0;
    double w_adv = 1.0;
    GateInput gate_input = GateInput::model_estimate;
};

struct EvalConfig {
    std::size_t targets_per_source = 0;  // 0 = every other speaker
};

/// Everything a run needs. The world seed field is ignored; the world is seeded from `seed`.
struct RunConfig {
    WorldConfig world;
    DatasetConfig dataset;
    NoiseSchedule schedule;
    EncoderHyper encoder;
    ClassifierHyper classifier;
    DecoderHyper decoder;
    std::vector<std::string> variants{"vanilla", "spk", "adv"};
    VariantConfig variant;
    PgdConfig pgd;
    ReverseConfig reverse;
    EvalConfig eval;
    std::uint64_t seed = 1;
    std::filesystem::path out_dir = "runs/default";
};

nlohmann::json to_json(const RunConfig& cfg);

/// Checks the document against the schema and every section's invariants.
/// All problems are collected; the ConfigError message lists each offending field.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

/// Per-stage random stream: seed XOR fnv1a(tag).
std::uint64_t stage_seed(const RunConfig& cfg, const std::string& tag);

TrainVariant make_variant(const RunConfig& cfg, VariantKind kind);

struct StageOptions {
    std::size_t threads = 1;
    std::ostream* log = nullptr;  // progress lines; timings only ever go here
};

// Stage commands. Each writes its artifact plus <artifact>.manifest.json into cfg.out_dir and
// returns immediately when an up-to-date manifest already covers identical inputs.
void cmd_world(const RunConfig& cfg, const StageOptions& opt = {});
void cmd_train_encoder(const RunConfig& cfg, const StageOptions& opt = {});
void cmd_train_classifier(const RunConfig& cfg, const StageOptions& opt = {});
void cmd_train_decoder(const RunConfig& cfg, VariantKind variant, const StageOptions& opt = {});
void cmd_attack(const RunConfig& cfg, const StageOptions& opt = {});
void cmd_eval(const RunConfig& cfg, const StageOptions& opt = {});
/// Renders report.csv as markdown into report.md and returns the text.
std::string cmd_report(const RunConfig& cfg, const StageOptions& opt = {});
void cmd_all(const RunConfig& cfg, const StageOptions& opt = {});

// Artifact file names inside out_dir.
std::filesystem::path dataset_path(const RunConfig& cfg);
std::filesystem::path encoder_path(const RunConfig& cfg);
std::filesystem::path classifier_path(const RunConfig& cfg);
std::filesystem::path decoder_path(const RunConfig& cfg, VariantKind variant);
std::filesystem::path attack_path(const RunConfig& cfg, MethodId method);
std::filesystem::path report_csv_path(const RunConfig& cfg);
std::filesystem::path manifest_path(const std::filesystem::path& artifact);

std::string hash_text(const std::string& text);
std::string hash_file(const std::filesystem::path& path);

std::string serialize_method_run(const MethodRun& run, std::uint64_t seed);
MethodRun parse_method_run(const std::string& text);

/// Training-side statistics persisted next to a decoder checkpoint.
struct DecoderStats {
    double max_delta_norm = 0.0;
    std::size_t pgd_calls = 0;
    double first_gate_rate = 0.0;
    double last_gate_rate = 0.0;
};
DecoderStats load_decoder_stats(const RunConfig& cfg, VariantKind variant);

}  // namespace diffattack
