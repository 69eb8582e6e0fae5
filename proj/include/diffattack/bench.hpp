#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffattack/classifier.hpp"
#include "diffattack/decoder.hpp"
#include "diffattack/diffusion.hpp"
#include "diffattack/encoder.hpp"
#include "diffattack/pgd.hpp"
#include "diffattack/world.hpp"

namespace diffattack {

enum class MethodId { vanilla, direct_perturb, spk_constraint, adv_constraint };

inline constexpr MethodId kAllMethods[] = {MethodId::vanilla, MethodId::direct_perturb, MethodId::spk_constraint,
                                           MethodId::adv_constraint};

std::string method_name(MethodId m);
MethodId parse_method(const std::string& name);

/// One source utterance converted toward one target speaker.
struct ConversionJob {
    std::size_t source_index = 0;  // into the test utterance list
    std::size_t source_speaker = 0;
    std::size_t target = 0;
};

/// Every test utterance paired with every other speaker, in (utterance, target) order.
/// targets_per_source > 0 keeps only the first k eligible targets after the source speaker (cyclically).
std::vector<ConversionJob> make_protocol(const std::vector<Utterance>& test, std::size_t n_speakers,
                                         std::size_t targets_per_source = 0);

struct TrainedModels {
    const EncoderParams* encoder = nullptr;
    const SpeakerClassifier* classifier = nullptr;
    const DecoderParams* vanilla = nullptr;
    const DecoderParams* spk = nullptr;
    const DecoderParams* adv = nullptr;
};

struct BenchSettings {
    ReverseConfig reverse;
    NoiseSchedule schedule;
    PgdConfig pgd;  // budget for the post-hoc perturbation method
    std::size_t threads = 1;
};

struct Generation {
    Tensor frames;        // [frames, d]
    Tensor perturbation;  // PGD delta (direct_perturb) or difference from the vanilla output
    std::size_t prediction = 0;
};

struct MethodRun {
    MethodId method = MethodId::vanilla;
    std::vector<ConversionJob> jobs;
    std::vector<Generation> outputs;
    double max_pgd_norm = 0.0;
    std::size_t pgd_calls = 0;
};

/// Runs one method over the protocol. Job i draws from its own stream derived from (seed, i), so the
/// result does not depend on the thread count. `reference` (vanilla outputs, same jobs) sets the
/// perturbation of the constraint methods.
MethodRun run_method(MethodId method, const TrainedModels& models, const std::vector<Utterance>& test,
                     const std::vector<ConversionJob>& jobs, const BenchSettings& settings, std::uint64_t seed,
                     const std::vector<Generation>* reference = nullptr);

/// Fraction of predictions equal to their target. Empty input gives 0.
double attack_success_rate(const std::vector<std::size_t>& predictions, const std::vector<std::size_t>& targets);

inline constexpr double kFrechetShrinkage = 1e-3;

/// Squared Frechet distance between Gaussian fits of two frame sets (rows are samples).
double frechet_gaussian(const Tensor& a, const Tensor& b, double shrinkage = kFrechetShrinkage);

struct MethodSummary {
    MethodId method = MethodId::vanilla;
    std::uint64_t seed = 0;
    std::size_t n_samples = 0;
    double acc = 0.0;
    double mean_perturb_l2 = 0.0;
    double mean_perturb_linf = 0.0;
    double frechet_to_target = 0.0;
    double frechet_to_source = 0.0;
};

/// Success rate, perturbation norms and Frechet distances against real frames of the dataset.
MethodSummary summarize(const MethodRun& run, const Dataset& ds, std::uint64_t seed);

struct EvalReport {
    std::vector<MethodSummary> rows;  // one per method, in kAllMethods order
    nlohmann::json metadata = nlohmann::json::object();

    const MethodSummary& row(MethodId m) const;
};

/// Orders rows canonically; throws ContractError when a method is missing or repeated.
EvalReport build_report(std::vector<MethodSummary> rows, nlohmann::json metadata = nlohmann::json::object());

std::string report_csv(const EvalReport& report);
EvalReport parse_report_csv(const std::string& text);
std::string report_markdown(const EvalReport& report);

}  // namespace diffattack
