#pragma once

#include <cstddef>
#include <vector>

#include <json.hpp>

#include "diffattack/autograd.hpp"
#include "diffattack/checkpoint.hpp"
#include "diffattack/diffusion.hpp"
#include "diffattack/mlp.hpp"
#include "diffattack/world.hpp"

namespace diffattack {

struct ClassifierHyper {
    std::vector<std::size_t> hidden{64};
    std::size_t steps = 2000;
    std::size_t batch = 64;
    double learning_rate = 3e-3;
    // Also train on forward-diffused frames at random t.
    bool noise_augment = false;
    std::size_t log_every = 100;
};

void to_json(nlohmann::json& j, const ClassifierHyper& h);
void from_json(const nlohmann::json& j, ClassifierHyper& h);

/// Softmax MLP over frames (d -> hidden -> n_speakers).
struct ClassifierParams {
    MlpParams net;

    std::size_t n_classes() const { return net.output_dim(); }
};

/// Frame logits [n, n_classes].
Tensor classify(const ClassifierParams& params, const Tensor& x);

/// argmax of row-mean logits; ties go to the smallest index.
std::size_t predict_pooled(const Tensor& logits);

/// True iff the pooled prediction for x equals y_prime.
bool is_target(const ClassifierParams& params, const Tensor& x, std::size_t y_prime);

/// What the gate and the attacks need from a speaker model.
class SpeakerClassifier {
  public:
    virtual ~SpeakerClassifier() = default;
    virtual std::size_t n_classes() const = 0;
    virtual Tensor logits(const Tensor& x) const = 0;
    virtual Var logits(Graph& graph, Var x) const = 0;
    virtual bool is_target(const Tensor& x, std::size_t y_prime) const;
};

/// Read-only snapshot of trained classifier parameters.
class MlpSpeakerClassifier final : public SpeakerClassifier {
  public:
    explicit MlpSpeakerClassifier(ClassifierParams params);
    std::size_t n_classes() const override { return params_.n_classes(); }
    Tensor logits(const Tensor& x) const override { return classify(params_, x); }
    Var logits(Graph& graph, Var x) const override;
    const ClassifierParams& params() const { return params_; }

  private:
    ClassifierParams params_;
};

struct ClassifierReport {
    double frame_accuracy = 0.0;
    double utterance_accuracy = 0.0;
};

struct ClassifierTraining {
    ClassifierParams params;
    std::vector<double> loss_history;
    ClassifierReport heldout;
};

ClassifierTraining train_classifier(const Dataset& ds, const ClassifierHyper& hyper, Rng& rng,
                                    const NoiseSchedule& sched = {});

ClassifierReport evaluate_classifier(const ClassifierParams& params, const std::vector<Utterance>& utts);

Checkpoint to_checkpoint(const ClassifierParams& params);
ClassifierParams classifier_from_checkpoint(const Checkpoint& ckpt);

}  // namespace diffattack
