#include "diffattack/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "diffattack/errors.hpp"

namespace diffattack {

const Tensor& Var::value() const { return graph->value(*this); }

Var Graph::leaf(Tensor value, bool requires_grad) {
    require_finite(value, "leaf");
    nodes_.push_back(Node{std::move(value), {}, requires_grad, {}});
    return Var{this, nodes_.size() - 1};
}

Var Graph::record(Tensor value, std::span<const Var> parents, BackwardFn fn) {
    bool any = false;
    for (Var p : parents) {
        if (p.graph != this) throw ContractError("operands live on different graphs");
        any = any || nodes_[p.id].requires_grad;
    }
    if (!value.all_finite()) {
        throw DivergenceError("operation produced a non-finite value at node " + std::to_string(nodes_.size()),
                              nodes_.size());
    }
    nodes_.push_back(Node{std::move(value), {}, any, any ? std::move(fn) : BackwardFn{}});
    return Var{this, nodes_.size() - 1};
}

const Tensor& Graph::grad(Var v) const {
    if (!has_grads_) throw ContractError("grad() requested before backward()");
    return nodes_[v.id].grad;
}

void Graph::backward(Var loss) {
    if (loss.graph != this) throw ContractError("loss lives on a different graph");
    if (nodes_[loss.id].value.size() != 1) {
        throw ContractError("backward() needs a scalar loss, got shape " +
                            shape_string(nodes_[loss.id].value.shape()));
    }
    for (auto& n : nodes_) n.grad = Tensor::zeros(n.value.shape());
    has_grads_ = true;
    nodes_[loss.id].grad[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        if (nodes_[i].backward) nodes_[i].backward(*this, i);
    }
}

namespace {

void same_graph(Var a, Var b) {
    if (a.graph != b.graph) throw ContractError("operands live on different graphs");
}

}  // namespace

Var matmul(Var a, Var b) {
    same_graph(a, b);
    Graph& g = *a.graph;
    return g.record(matmul(a.value(), b.value()), {a, b}, [a, b](Graph& g, std::size_t self) {
        const Tensor& up = g.grad_ref(self);
        if (g.needs(a.id)) {
            Tensor ga = matmul(up, transpose(g.value_ref(b.id)));
            g.grad_ref(a.id) += ga.reshaped(g.value_ref(a.id).shape());
        }
        if (g.needs(b.id)) {
            const Tensor& av = g.value_ref(a.id);
            Tensor gb = matmul(transpose(av.reshaped({av.rows(), av.cols()})), up);
            g.grad_ref(b.id) += gb.reshaped(g.value_ref(b.id).shape());
        }
    });
}

Var add_bias(Var a, Var bias) {
    same_graph(a, bias);
    const Tensor& av = a.value();
    const Tensor& bv = bias.value();
    if (bv.size() != av.cols()) {
        throw ShapeError("add_bias: " + shape_string(av.shape()) + " + " + shape_string(bv.shape()));
    }
    Tensor out = av;
    for (std::size_t i = 0; i < out.rows(); ++i) {
        auto r = out.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) r[j] += bv[j];
    }
    return a.graph->record(std::move(out), {a, bias}, [a, bias](Graph& g, std::size_t self) {
        const Tensor& up = g.grad_ref(self);
        if (g.needs(a.id)) g.grad_ref(a.id) += up;
        if (g.needs(bias.id)) {
            Tensor& gb = g.grad_ref(bias.id);
            for (std::size_t i = 0; i < up.rows(); ++i) {
                auto r = up.row(i);
                for (std::size_t j = 0; j < r.size(); ++j) gb[j] += r[j];
            }
        }
    });
}

Var add(Var a, Var b) {
    same_graph(a, b);
    return a.graph->record(a.value() + b.value(), {a, b}, [a, b](Graph& g, std::size_t self) {
        if (g.needs(a.id)) g.grad_ref(a.id) += g.grad_ref(self);
        if (g.needs(b.id)) g.grad_ref(b.id) += g.grad_ref(self);
    });
}

Var sub(Var a, Var b) {
    same_graph(a, b);
    return a.graph->record(a.value() - b.value(), {a, b}, [a, b](Graph& g, std::size_t self) {
        if (g.needs(a.id)) g.grad_ref(a.id) += g.grad_ref(self);
        if (g.needs(b.id)) g.grad_ref(b.id) -= g.grad_ref(self);
    });
}

Var mul(Var a, Var b) {
    same_graph(a, b);
    return a.graph->record(hadamard(a.value(), b.value()), {a, b}, [a, b](Graph& g, std::size_t self) {
        const Tensor& up = g.grad_ref(self);
        if (g.needs(a.id)) g.grad_ref(a.id) += hadamard(up, g.value_ref(b.id));
        if (g.needs(b.id)) g.grad_ref(b.id) += hadamard(up, g.value_ref(a.id));
    });
}

Var scale(Var a, double s) {
    return a.graph->record(a.value() * s, {a}, [a, s](Graph& g, std::size_t self) {
        g.grad_ref(a.id) += g.grad_ref(self) * s;
    });
}

Var scale_rows(Var a, const Tensor& per_row) {
    const Tensor& av = a.value();
    if (per_row.size() != av.rows()) {
        throw ShapeError("scale_rows: " + std::to_string(per_row.size()) + " factors for " +
                         std::to_string(av.rows()) + " rows");
    }
    Tensor out = av;
    for (std::size_t i = 0; i < out.rows(); ++i)
        for (double& v : out.row(i)) v *= per_row[i];
    return a.graph->record(std::move(out), {a}, [a, per_row](Graph& g, std::size_t self) {
        const Tensor& up = g.grad_ref(self);
        Tensor& ga = g.grad_ref(a.id);
        for (std::size_t i = 0; i < up.rows(); ++i) {
            auto u = up.row(i);
            auto d = ga.row(i);
            for (std::size_t j = 0; j < u.size(); ++j) d[j] += u[j] * per_row[i];
        }
    });
}

Var tanh(Var a) {
    Tensor out = a.value();
    for (double& v : out.raw()) v = std::tanh(v);
    return a.graph->record(std::move(out), {a}, [a](Graph& g, std::size_t self) {
        const Tensor& up = g.grad_ref(self);
        const Tensor& y = g.value_ref(self);
        Tensor& ga = g.grad_ref(a.id);
        for (std::size_t i = 0; i < up.size(); ++i) ga[i] += up[i] * (1.0 - y[i] * y[i]);
    });
}

Var square(Var a) {
    return a.graph->record(hadamard(a.value(), a.value()), {a}, [a](Graph& g, std::size_t self) {
        const Tensor& up = g.grad_ref(self);
        const Tensor& x = g.value_ref(a.id);
        Tensor& ga = g.grad_ref(a.id);
        for (std::size_t i = 0; i < up.size(); ++i) ga[i] += 2.0 * x[i] * up[i];
    });
}

Var sum(Var a) {
    double s = 0.0;
    for (double v : a.value().raw()) s += v;
    return a.graph->record(Tensor::scalar(s), {a}, [a](Graph& g, std::size_t self) {
        const double up = g.grad_ref(self)[0];
        for (double& v : g.grad_ref(a.id).raw()) v += up;
    });
}

Var mean(Var a) {
    const double n = static_cast<double>(a.value().size());
    return scale(sum(a), 1.0 / n);
}

Var mean_rows(Var a) {
    const std::size_t n = a.value().rows();
    return a.graph->record(mean_rows(a.value()), {a}, [a, n](Graph& g, std::size_t self) {
        const Tensor& up = g.grad_ref(self);
        Tensor& ga = g.grad_ref(a.id);
        const double inv = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            auto d = ga.row(i);
            for (std::size_t j = 0; j < d.size(); ++j) d[j] += up[j] * inv;
        }
    });
}

Var row_sq_norms(Var a) {
    const Tensor& av = a.value();
    Tensor out({av.rows()});
    for (std::size_t i = 0; i < av.rows(); ++i) out[i] = squared_norm(av.row(i));
    return a.graph->record(std::move(out), {a}, [a](Graph& g, std::size_t self) {
        const Tensor& up = g.grad_ref(self);
        const Tensor& x = g.value_ref(a.id);
        Tensor& ga = g.grad_ref(a.id);
        for (std::size_t i = 0; i < x.rows(); ++i) {
            auto xr = x.row(i);
            auto d = ga.row(i);
            for (std::size_t j = 0; j < xr.size(); ++j) d[j] += 2.0 * xr[j] * up[i];
        }
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ContractError("concat_cols of nothing");
    Graph& graph = *parts[0].graph;
    std::vector<Tensor> values;
    values.reserve(parts.size());
    for (Var p : parts) {
        same_graph(parts[0], p);
        values.push_back(p.value().rank() == 1 ? p.value().reshaped({1, p.value().size()}) : p.value());
    }
    std::vector<Var> ps(parts.begin(), parts.end());
    return graph.record(concat_cols(std::span<const Tensor>(values)), ps, [ps](Graph& g, std::size_t self) {
        const Tensor& up = g.grad_ref(self);
        std::size_t offset = 0;
        for (Var p : ps) {
            const std::size_t w = g.value_ref(p.id).cols();
            if (g.needs(p.id)) {
                Tensor& gp = g.grad_ref(p.id);
                for (std::size_t i = 0; i < up.rows(); ++i) {
                    auto u = up.row(i).subspan(offset, w);
                    auto d = gp.row(i);
                    for (std::size_t j = 0; j < w; ++j) d[j] += u[j];
                }
            }
            offset += w;
        }
    });
}

Var gather_rows(Var table, std::span<const std::size_t> index) {
    const Tensor& tv = table.value();
    const std::size_t m = tv.cols();
    Tensor out({index.size(), m});
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= tv.rows()) {
            throw ContractError("gather_rows: index " + std::to_string(index[i]) + " out of range " +
                                std::to_string(tv.rows()));
        }
        auto src = tv.row(index[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    std::vector<std::size_t> idx(index.begin(), index.end());
    return table.graph->record(std::move(out), {table}, [table, idx](Graph& g, std::size_t self) {
        const Tensor& up = g.grad_ref(self);
        Tensor& gt = g.grad_ref(table.id);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            auto u = up.row(i);
            auto d = gt.row(idx[i]);
            for (std::size_t j = 0; j < u.size(); ++j) d[j] += u[j];
        }
    });
}

namespace {

double row_log_sum_exp(std::span<const double> r) {
    const double mx = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (double v : r) z += std::exp(v - mx);
    return mx + std::log(z);
}

}  // namespace

Var cross_entropy(Var logits, std::span<const std::size_t> labels) {
    const Tensor& lv = logits.value();
    const std::size_t n = lv.rows(), c = lv.cols();
    if (labels.size() != n) throw ShapeError("cross_entropy: label count does not match rows");
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] >= c) {
            throw ContractError("cross_entropy: label " + std::to_string(labels[i]) + " out of range for " +
                                std::to_string(c) + " classes");
        }
        auto r = lv.row(i);
        total += row_log_sum_exp(r) - r[labels[i]];
    }
    std::vector<std::size_t> lab(labels.begin(), labels.end());
    return logits.graph->record(
        Tensor::scalar(total / static_cast<double>(n)), {logits}, [logits, lab](Graph& g, std::size_t self) {
            const double up = g.grad_ref(self)[0] / static_cast<double>(lab.size());
            const Tensor p = softmax_rows(g.value_ref(logits.id));
            Tensor& gl = g.grad_ref(logits.id);
            for (std::size_t i = 0; i < lab.size(); ++i) {
                auto pr = p.row(i);
                auto d = gl.row(i);
                for (std::size_t j = 0; j < pr.size(); ++j) d[j] += up * (pr[j] - (j == lab[i] ? 1.0 : 0.0));
            }
        });
}

Var cross_entropy(Var logits, std::size_t label) {
    std::vector<std::size_t> labels(logits.value().rows(), label);
    return cross_entropy(logits, labels);
}

Var mse(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "mse");
    return mean(square(sub(a, b)));
}

double cross_entropy(const Tensor& logits, std::size_t label) {
    if (label >= logits.cols()) {
        throw ContractError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                            std::to_string(logits.cols()) + " classes");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        auto r = logits.row(i);
        total += row_log_sum_exp(r) - r[label];
    }
    return total / static_cast<double>(logits.rows());
}

double mse(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mse");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s / static_cast<double>(a.size());
}

}  // namespace diffattack
