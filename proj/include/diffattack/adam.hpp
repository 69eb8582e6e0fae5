#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "diffattack/tensor.hpp"

namespace diffattack {

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    AdamConfig config;
    std::vector<Tensor> first_moment;
    std::vector<Tensor> second_moment;
    std::size_t step = 0;

    static AdamState for_params(std::span<const Tensor* const> params, AdamConfig config = {});
};

/// In-place Adam update with bias correction.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state);

}  // namespace diffattack
