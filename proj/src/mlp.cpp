#include "diffattack/mlp.hpp"

#include <cmath>
#include <string>

#include "diffattack/errors.hpp"

namespace diffattack {

std::size_t MlpParams::input_dim() const { return layers.empty() ? 0 : layers.front().weight.rows(); }

std::size_t MlpParams::output_dim() const { return layers.empty() ? 0 : layers.back().weight.cols(); }

void MlpParams::validate() const {
    if (layers.empty()) throw ShapeError("mlp has no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        if (l.weight.rank() != 2 || l.bias.size() != l.weight.cols()) {
            throw ShapeError("mlp layer " + std::to_string(i) + ": weight " + shape_string(l.weight.shape()) +
                             " bias " + shape_string(l.bias.shape()));
        }
        if (i > 0 && layers[i - 1].weight.cols() != l.weight.rows()) {
            throw ShapeError("mlp layer " + std::to_string(i) + " input " + std::to_string(l.weight.rows()) +
                             " does not match previous output " + std::to_string(layers[i - 1].weight.cols()));
        }
    }
}

std::vector<Tensor*> MlpParams::tensors() {
    std::vector<Tensor*> out;
    for (auto& l : layers) {
        out.push_back(&l.weight);
        out.push_back(&l.bias);
    }
    return out;
}

std::vector<const Tensor*> MlpParams::tensors() const {
    std::vector<const Tensor*> out;
    for (const auto& l : layers) {
        out.push_back(&l.weight);
        out.push_back(&l.bias);
    }
    return out;
}

MlpParams init_mlp(std::span<const std::size_t> sizes, Rng& rng) {
    if (sizes.size() < 2) throw ContractError("init_mlp needs at least input and output sizes");
    MlpParams p;
    for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
        const std::size_t in = sizes[i], out = sizes[i + 1];
        const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
        DenseLayer layer;
        layer.weight = Tensor({in, out});
        for (double& w : layer.weight.raw()) w = rng.uniform(-limit, limit);
        layer.bias = Tensor({out});
        layer.activation = (i + 2 < sizes.size()) ? Activation::tanh : Activation::identity;
        p.layers.push_back(std::move(layer));
    }
    return p;
}

namespace {

void check_input(const MlpParams& params, const Tensor& input) {
    if (input.cols() != params.input_dim()) {
        throw ShapeError("mlp input width " + std::to_string(input.cols()) + ", expected " +
                         std::to_string(params.input_dim()));
    }
}

}  // namespace

Tensor mlp_forward(const MlpParams& params, const Tensor& input) {
    check_input(params, input);
    Tensor h = input.rank() == 1 ? input.reshaped({1, input.size()}) : input;
    for (const auto& l : params.layers) {
        h = matmul(h, l.weight);
        for (std::size_t i = 0; i < h.rows(); ++i) {
            auto r = h.row(i);
            for (std::size_t j = 0; j < r.size(); ++j) r[j] += l.bias[j];
        }
        if (l.activation == Activation::tanh)
            for (double& v : h.raw()) v = std::tanh(v);
    }
    return h;
}

std::vector<Var> MlpVars::flat() const {
    std::vector<Var> out;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        out.push_back(weights[i]);
        out.push_back(biases[i]);
    }
    return out;
}

MlpVars bind(Graph& graph, const MlpParams& params, bool requires_grad) {
    params.validate();
    MlpVars vars;
    for (const auto& l : params.layers) {
        vars.weights.push_back(graph.leaf(l.weight, requires_grad));
        vars.biases.push_back(graph.leaf(l.bias, requires_grad));
    }
    return vars;
}

Var mlp_forward(const MlpParams& params, const MlpVars& vars, Var input) {
    check_input(params, input.value());
    Var h = input;
    for (std::size_t i = 0; i < params.layers.size(); ++i) {
        h = add_bias(matmul(h, vars.weights[i]), vars.biases[i]);
        if (params.layers[i].activation == Activation::tanh) h = tanh(h);
    }
    return h;
}

std::vector<Tensor> gradients(const Graph& graph, const MlpVars& vars) {
    std::vector<Tensor> out;
    for (Var v : vars.flat()) out.push_back(graph.grad(v));
    return out;
}

}  // namespace diffattack
