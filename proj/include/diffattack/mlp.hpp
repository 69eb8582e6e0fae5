#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "diffattack/autograd.hpp"
#include "diffattack/rng.hpp"
#include "diffattack/tensor.hpp"

namespace diffattack {

enum class Activation { identity, tanh };

struct DenseLayer {
    Tensor weight;  // [in, out]
    Tensor bias;    // [out]
    Activation activation = Activation::identity;
};

struct MlpParams {
    std::vector<DenseLayer> layers;

    std::size_t input_dim() const;
    std::size_t output_dim() const;

    /// Throws ShapeError unless consecutive layers compose.
    void validate() const;

    /// Flat parameter list in a fixed order (w0, b0, w1, b1, ...).
    std::vector<Tensor*> tensors();
    std::vector<const Tensor*> tensors() const;
};

/// tanh hidden layers, identity output. Glorot-uniform weights, zero biases.
MlpParams init_mlp(std::span<const std::size_t> sizes, Rng& rng);

Tensor mlp_forward(const MlpParams& params, const Tensor& input);

/// MLP parameters placed on a tape.
struct MlpVars {
    std::vector<Var> weights;
    std::vector<Var> biases;

    std::vector<Var> flat() const;
};

MlpVars bind(Graph& graph, const MlpParams& params, bool requires_grad = true);
Var mlp_forward(const MlpParams& params, const MlpVars& vars, Var input);

/// Gradients in MlpParams::tensors() order.
std::vector<Tensor> gradients(const Graph& graph, const MlpVars& vars);

}  // namespace diffattack
