#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffattack/adam.hpp"
#include "diffattack/checkpoint.hpp"
#include "diffattack/classifier.hpp"
#include "diffattack/diffusion.hpp"
#include "diffattack/encoder.hpp"
#include "diffattack/mlp.hpp"
#include "diffattack/pgd.hpp"
#include "diffattack/world.hpp"

namespace diffattack {

/// Score network s(x_t, xbar0, e_spk, t) and its learned speaker-embedding table.
///
/// The MLP sees concat[x_t, xbar0, e_spk, t, lambda_t] and its output is divided by
/// sqrt(lambda_t), so the raw network predicts the standardized kernel noise and stays
/// O(1) across the whole time range.
struct DecoderParams {
    MlpParams score_net;
    Tensor speaker_table;  // [n_speakers, e_dim]

    std::size_t feature_dim() const { return score_net.output_dim(); }
    std::size_t n_speakers() const { return speaker_table.rows(); }
    std::size_t embedding_dim() const { return speaker_table.cols(); }

    std::vector<Tensor*> tensors();
    std::vector<const Tensor*> tensors() const;
    void validate() const;
};

DecoderParams init_decoder(std::size_t feature_dim, std::size_t n_speakers, std::size_t embedding_dim,
                           std::span<const std::size_t> hidden, Rng& rng);

/// Per-row score estimate for x_t [n, d] with conditioning xbar0 [n, d].
Tensor score_forward(const DecoderParams& params, const Tensor& x_t, const Tensor& xbar0,
                     std::span<const std::size_t> speakers, std::span<const double> t, const NoiseSchedule& sched);

struct DecoderVars {
    MlpVars net;
    Var speaker_table;

    std::vector<Var> flat() const;
};

DecoderVars bind(Graph& graph, const DecoderParams& params, bool requires_grad = true);
Var score_forward(const DecoderParams& params, const DecoderVars& vars, Var x_t, const Tensor& xbar0,
                  std::span<const std::size_t> speakers, std::span<const double> t, const NoiseSchedule& sched);
std::vector<Tensor> gradients(const Graph& graph, const DecoderVars& vars);

/// Clean training frames for the decoder.
struct DecoderBatch {
    Tensor x0;     // [n, d]
    Tensor xbar0;  // [n, d]
    std::vector<std::size_t> speakers;

    std::size_t size() const { return speakers.size(); }
};

/// Forward-diffused batch: one t ~ U[t_min, 1] and one kernel draw per row.
struct DiffusedBatch {
    std::vector<double> t;
    Tensor lambda;  // [n]
    Tensor x_t;
    Tensor mu_t;
    Tensor true_score;
};

DiffusedBatch diffuse_batch(const DecoderBatch& batch, const NoiseSchedule& sched, Rng& rng,
                            double t_min = kDefaultTMin);

/// mean_i lambda_i * ||score_i - target_i||^2
double weighted_score_error(const Tensor& score, const Tensor& target, const Tensor& lambda);
Var weighted_score_error(Var score, const Tensor& target, const Tensor& lambda);

/// Denoising score-matching loss of the decoder on a fresh diffusion of `batch`.
double dsm_loss(const DecoderParams& params, const DecoderBatch& batch, const NoiseSchedule& sched, Rng& rng,
                double t_min = kDefaultTMin);

enum class VariantKind { vanilla, spk_constraint, adv_constraint };

/// Point the gate classifies and PGD perturbs during adversarial-constraint training.
enum class GateInput {
    model_estimate,  // x_t + lambda_t * s(x_t, ...): the kernel mean the model currently implies
    forward_sample,  // the forward-diffused x_t itself
};

struct TrainVariant {
    VariantKind kind = VariantKind::vanilla;
    double w_spk = 1.0;
    double w_adv = 1.0;
    PgdConfig pgd;
    GateInput gate_input = GateInput::model_estimate;

    static TrainVariant vanilla() { return {}; }
    static TrainVariant spk_constraint(double w_spk) {
        TrainVariant v;
        v.kind = VariantKind::spk_constraint;
        v.w_spk = w_spk;
        return v;
    }
    static TrainVariant adv_constraint(PgdConfig pgd, double w_adv) {
        TrainVariant v;
        v.kind = VariantKind::adv_constraint;
        v.pgd = pgd;
        v.w_adv = w_adv;
        return v;
    }

    void validate() const;
};

std::string variant_name(VariantKind kind);
VariantKind parse_variant(const std::string& name);
void to_json(nlohmann::json& j, const TrainVariant& v);

struct StepMetrics {
    double loss = 0.0;       // total reported objective
    double dsm = 0.0;        // weighted score-matching term
    double spk = 0.0;        // classifier cross-entropy on the implied mean (spk variant)
    double adv = 0.0;        // mean ||delta*||^2 over the batch (adv variant)
    double gate_rate = 0.0;  // fraction of rows the gate sent through PGD
    double max_delta_norm = 0.0;
    std::size_t pgd_calls = 0;
};

/// One Adam step of the selected regime. During training y' is each row's own speaker.
StepMetrics gated_training_step(DecoderParams& params, AdamState& opt, const DecoderBatch& batch,
                                const SpeakerClassifier& classifier, const TrainVariant& variant,
                                const NoiseSchedule& sched, Rng& rng, double t_min = kDefaultTMin);

struct DecoderHyper {
    std::vector<std::size_t> hidden{64, 64};
    std::size_t embedding_dim = 8;
    std::size_t steps = 2000;
    std::size_t batch = 64;
    double learning_rate = 2e-3;
    std::size_t log_every = 100;
    double t_min = kDefaultTMin;
};

void to_json(nlohmann::json& j, const DecoderHyper& h);
void from_json(const nlohmann::json& j, DecoderHyper& h);

struct MetricsRecord {
    std::size_t step = 0;
    double loss = 0.0;
    double dsm = 0.0;
    double spk = 0.0;
    double adv = 0.0;
    double gate_rate = 0.0;
};

struct DecoderTraining {
    DecoderParams params;
    std::vector<MetricsRecord> history;
    double max_delta_norm = 0.0;
    std::size_t pgd_calls = 0;
};

/// Full training loop on the dataset's ground-truth averages.
DecoderTraining train_decoder(const Dataset& ds, const SpeakerClassifier& classifier, const TrainVariant& variant,
                              const DecoderHyper& hyper, const NoiseSchedule& sched, Rng& rng);

/// Encode x_src, start from Normal(xbar0, I) and integrate the reverse SDE conditioned on the target speaker.
Tensor convert(const DecoderParams& decoder, const EncoderParams& encoder, const Tensor& x_src,
               std::size_t target_speaker, const ReverseConfig& reverse, const NoiseSchedule& sched, Rng& rng);

Checkpoint to_checkpoint(const DecoderParams& params);
DecoderParams decoder_from_checkpoint(const Checkpoint& ckpt);

}  // namespace diffattack
