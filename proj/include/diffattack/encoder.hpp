#pragma once

#include <cstddef>
#include <vector>

#include <json.hpp>

#include "diffattack/adam.hpp"
#include "diffattack/checkpoint.hpp"
#include "diffattack/mlp.hpp"
#include "diffattack/world.hpp"

namespace diffattack {

struct EncoderHyper {
    std::vector<std::size_t> hidden{64, 64};
    std::size_t steps = 3000;
    std::size_t batch = 64;
    double learning_rate = 2e-3;
    std::size_t log_every = 100;
};

void to_json(nlohmann::json& j, const EncoderHyper& h);
void from_json(const nlohmann::json& j, EncoderHyper& h);

/// Maps an observed frame x to its speaker-independent average xbar0 (d -> hidden -> d).
struct EncoderParams {
    MlpParams net;
};

struct EncoderTraining {
    EncoderParams params;
    std::vector<double> loss_history;  // minibatch MSE averaged over each log interval
    double initial_loss = 0.0;         // full train-set MSE before the first step
    double heldout_loss = 0.0;         // MSE on test frames after training
};

EncoderTraining train_encoder(const Dataset& ds, const EncoderHyper& hyper, Rng& rng);

/// x: [n, d] -> xbar0 estimate [n, d].
Tensor encode(const EncoderParams& params, const Tensor& x);

/// Element-mean squared error of encode(x) against xbar0 over the given utterances.
double encoder_mse(const EncoderParams& params, const std::vector<Utterance>& utts);

Checkpoint to_checkpoint(const EncoderParams& params);
EncoderParams encoder_from_checkpoint(const Checkpoint& ckpt);

}  // namespace diffattack
