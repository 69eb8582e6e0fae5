#include "diffattack/encoder.hpp"

#include <cmath>

#include "diffattack/errors.hpp"
#include "diffattack/training.hpp"

namespace diffattack {

void to_json(nlohmann::json& j, const EncoderHyper& h) {
    j = {{"hidden", h.hidden},
         {"steps", h.steps},
         {"batch", h.batch},
         {"learning_rate", h.learning_rate},
         {"log_every", h.log_every}};
}

void from_json(const nlohmann::json& j, EncoderHyper& h) {
    EncoderHyper d;
    h.hidden = j.value("hidden", d.hidden);
    h.steps = j.value("steps", d.steps);
    h.batch = j.value("batch", d.batch);
    h.learning_rate = j.value("learning_rate", d.learning_rate);
    h.log_every = j.value("log_every", d.log_every);
}

Tensor encode(const EncoderParams& params, const Tensor& x) { return mlp_forward(params.net, x); }

double encoder_mse(const EncoderParams& params, const std::vector<Utterance>& utts) {
    const FrameSet fs = flatten(utts);
    if (fs.labels.empty()) return 0.0;
    return mse(encode(params, fs.x), fs.xbar0);
}

EncoderTraining train_encoder(const Dataset& ds, const EncoderHyper& hyper, Rng& rng) {
    const FrameSet train = flatten(ds.train);
    if (train.labels.empty()) throw ContractError("train_encoder: empty training set");
    const std::size_t d = ds.world.feature_dim();

    std::vector<std::size_t> sizes{d};
    sizes.insert(sizes.end(), hyper.hidden.begin(), hyper.hidden.end());
    sizes.push_back(d);

    EncoderTraining out;
    out.params.net = init_mlp(sizes, rng);
    out.initial_loss = mse(encode(out.params, train.x), train.xbar0);

    auto params = out.params.net.tensors();
    AdamState opt = AdamState::for_params(std::vector<const Tensor*>(params.begin(), params.end()),
                                          AdamConfig{.learning_rate = hyper.learning_rate});
    double window = 0.0;
    std::size_t in_window = 0;
    for (std::size_t step = 0; step < hyper.steps; ++step) {
        const auto idx = sample_batch(train.labels.size(), hyper.batch, rng);
        Graph g;
        const MlpVars vars = bind(g, out.params.net);
        Var x = g.constant(take_rows(train.x, idx));
        Var target = g.constant(take_rows(train.xbar0, idx));
        Var loss = mse(mlp_forward(out.params.net, vars, x), target);
        const double value = loss.value().item();
        if (!std::isfinite(value)) throw DivergenceError("encoder loss is non-finite", step);
        g.backward(loss);
        adam_step(params, gradients(g, vars), opt);
        window += value;
        if (++in_window == hyper.log_every || step + 1 == hyper.steps) {
            out.loss_history.push_back(window / static_cast<double>(in_window));
            window = 0.0;
            in_window = 0;
        }
    }
    out.heldout_loss = encoder_mse(out.params, ds.test);
    return out;
}

Checkpoint to_checkpoint(const EncoderParams& params) {
    Checkpoint c;
    c.module = "encoder";
    put_mlp(c, "net", params.net);
    return c;
}

EncoderParams encoder_from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.module != "encoder") throw FormatError("expected an encoder checkpoint, got '" + ckpt.module + "'");
    return EncoderParams{get_mlp(ckpt, "net")};
}

}  // namespace diffattack
