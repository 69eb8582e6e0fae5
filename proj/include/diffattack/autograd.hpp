#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "diffattack/tensor.hpp"

namespace diffattack {

class Graph;

/// Handle to a node on a Graph. Cheap to copy; valid while the graph lives.
struct Var {
    Graph* graph = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
};

/// Reverse-mode tape. Built fresh for every forward pass and discarded after backward.
class Graph {
  public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var leaf(Tensor value, bool requires_grad = true);
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    const Tensor& value(Var v) const { return nodes_[v.id].value; }
    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

    /// Gradient of the last backward() target w.r.t. v. Zero if v was not reached.
    const Tensor& grad(Var v) const;

    /// Accumulates d(loss)/d(node) for every node; loss must hold exactly one value.
    void backward(Var loss);

    std::size_t size() const noexcept { return nodes_.size(); }

    // Used by op implementations.
    using BackwardFn = std::function<void(Graph&, std::size_t self)>;
    Var record(Tensor value, std::span<const Var> parents, BackwardFn fn);
    Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
        return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(fn));
    }
    Tensor& grad_ref(std::size_t id) { return nodes_[id].grad; }
    const Tensor& value_ref(std::size_t id) const { return nodes_[id].value; }
    bool needs(std::size_t id) const { return nodes_[id].requires_grad; }

  private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
    bool has_grads_ = false;
};

// Differentiable ops. All operands must live on the same graph.
Var matmul(Var a, Var b);
Var add_bias(Var a, Var bias);  // a[n,m] + bias[m] broadcast over rows
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var scale_rows(Var a, const Tensor& per_row);  // row i multiplied by per_row[i] (constant)
Var tanh(Var a);
Var square(Var a);
Var sum(Var a);
Var mean(Var a);
Var mean_rows(Var a);  // [n,m] -> [1,m]
Var row_sq_norms(Var a);  // [n,m] -> [n] of squared row norms
Var concat_cols(std::span<const Var> parts);
Var gather_rows(Var table, std::span<const std::size_t> index);

/// Mean over rows of -log softmax(logits_i)[labels_i].
Var cross_entropy(Var logits, std::span<const std::size_t> labels);
Var cross_entropy(Var logits, std::size_t label);

/// Mean of squared element differences.
Var mse(Var a, Var b);

/// Untaped counterparts.
double cross_entropy(const Tensor& logits, std::size_t label);
double mse(const Tensor& a, const Tensor& b);

}  // namespace diffattack
