#include "diffattack/classifier.hpp"

#include <cmath>

#include "diffattack/adam.hpp"
#include "diffattack/errors.hpp"
#include "diffattack/training.hpp"

namespace diffattack {

void to_json(nlohmann::json& j, const ClassifierHyper& h) {
    j = {{"hidden", h.hidden},
         {"steps", h.steps},
         {"batch", h.batch},
         {"learning_rate", h.learning_rate},
         {"noise_augment", h.noise_augment},
         {"log_every", h.log_every}};
}

void from_json(const nlohmann::json& j, ClassifierHyper& h) {
    ClassifierHyper d;
    h.hidden = j.value("hidden", d.hidden);
    h.steps = j.value("steps", d.steps);
    h.batch = j.value("batch", d.batch);
    h.learning_rate = j.value("learning_rate", d.learning_rate);
    h.noise_augment = j.value("noise_augment", d.noise_augment);
    h.log_every = j.value("log_every", d.log_every);
}

Tensor classify(const ClassifierParams& params, const Tensor& x) { return mlp_forward(params.net, x); }

std::size_t predict_pooled(const Tensor& logits) {
    const Tensor pooled = mean_rows(logits);
    return argmax(pooled.row(0));
}

bool is_target(const ClassifierParams& params, const Tensor& x, std::size_t y_prime) {
    if (y_prime >= params.n_classes()) {
        throw ContractError("target label " + std::to_string(y_prime) + " out of range");
    }
    return predict_pooled(classify(params, x)) == y_prime;
}

bool SpeakerClassifier::is_target(const Tensor& x, std::size_t y_prime) const {
    if (y_prime >= n_classes()) throw ContractError("target label " + std::to_string(y_prime) + " out of range");
    return predict_pooled(logits(x)) == y_prime;
}

MlpSpeakerClassifier::MlpSpeakerClassifier(ClassifierParams params) : params_(std::move(params)) {
    params_.net.validate();
}

Var MlpSpeakerClassifier::logits(Graph& graph, Var x) const {
    const MlpVars vars = bind(graph, params_.net, false);
    return mlp_forward(params_.net, vars, x);
}

ClassifierReport evaluate_classifier(const ClassifierParams& params, const std::vector<Utterance>& utts) {
    ClassifierReport r;
    if (utts.empty()) return r;
    std::size_t frames = 0, frame_hits = 0, utt_hits = 0;
    for (const auto& u : utts) {
        const Tensor logits = classify(params, u.x);
        for (std::size_t i = 0; i < logits.rows(); ++i) {
            frame_hits += argmax(logits.row(i)) == u.speaker_id;
            ++frames;
        }
        utt_hits += predict_pooled(logits) == u.speaker_id;
    }
    r.frame_accuracy = static_cast<double>(frame_hits) / static_cast<double>(frames);
    r.utterance_accuracy = static_cast<double>(utt_hits) / static_cast<double>(utts.size());
    return r;
}

ClassifierTraining train_classifier(const Dataset& ds, const ClassifierHyper& hyper, Rng& rng,
                                    const NoiseSchedule& sched) {
    const FrameSet train = flatten(ds.train);
    if (train.labels.empty()) throw ContractError("train_classifier: empty training set");
    const std::size_t n_classes = ds.world.n_speakers();
    for (auto l : train.labels)
        if (l >= n_classes) throw ContractError("train_classifier: label out of range");

    std::vector<std::size_t> sizes{ds.world.feature_dim()};
    sizes.insert(sizes.end(), hyper.hidden.begin(), hyper.hidden.end());
    sizes.push_back(n_classes);

    ClassifierTraining out;
    out.params.net = init_mlp(sizes, rng);
    auto params = out.params.net.tensors();
    AdamState opt = AdamState::for_params(std::vector<const Tensor*>(params.begin(), params.end()),
                                          AdamConfig{.learning_rate = hyper.learning_rate});
    double window = 0.0;
    std::size_t in_window = 0;
    for (std::size_t step = 0; step < hyper.steps; ++step) {
        const auto idx = sample_batch(train.labels.size(), hyper.batch, rng);
        Tensor xb = take_rows(train.x, idx);
        std::vector<std::size_t> yb;
        for (auto i : idx) yb.push_back(train.labels[i]);
        if (hyper.noise_augment) {
            for (std::size_t i = 0; i < idx.size(); ++i) {
                if (rng.uniform(0.0, 1.0) >= 0.5) continue;
                const Tensor x0 = Tensor::vector({xb.row(i).begin(), xb.row(i).end()});
                const Tensor bar = Tensor::vector({train.xbar0.row(idx[i]).begin(), train.xbar0.row(idx[i]).end()});
                const auto draw = forward_sample(x0, bar, rng.uniform(kDefaultTMin, 1.0), sched, rng);
                std::copy(draw.x_t.raw().begin(), draw.x_t.raw().end(), xb.row(i).begin());
            }
        }
        Graph g;
        const MlpVars vars = bind(g, out.params.net);
        Var loss = cross_entropy(mlp_forward(out.params.net, vars, g.constant(std::move(xb))), yb);
        const double value = loss.value().item();
        if (!std::isfinite(value)) throw DivergenceError("classifier loss is non-finite", step);
        g.backward(loss);
        adam_step(params, gradients(g, vars), opt);
        window += value;
        if (++in_window == hyper.log_every || step + 1 == hyper.steps) {
            out.loss_history.push_back(window / static_cast<double>(in_window));
            window = 0.0;
            in_window = 0;
        }
    }
    out.heldout = evaluate_classifier(out.params, ds.test);
    return out;
}

Checkpoint to_checkpoint(const ClassifierParams& params) {
    Checkpoint c;
    c.module = "classifier";
    put_mlp(c, "net", params.net);
    return c;
}

ClassifierParams classifier_from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.module != "classifier") throw FormatError("expected a classifier checkpoint, got '" + ckpt.module + "'");
    return ClassifierParams{get_mlp(ckpt, "net")};
}

}  // namespace diffattack
