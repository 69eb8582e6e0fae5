#include "diffattack/pgd.hpp"

#include <algorithm>
#include <cmath>

#include "diffattack/autograd.hpp"
#include "diffattack/errors.hpp"

namespace diffattack {

void PgdConfig::validate() const {
    if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ConfigError("pgd.epsilon must be finite and >= 0");
    if (!(alpha > 0.0)) throw ConfigError("pgd.alpha must be > 0");
    if (n_iters < 1) throw ConfigError("pgd.n_iters must be >= 1");
}

void to_json(nlohmann::json& j, const PgdConfig& c) {
    j = {{"epsilon", c.epsilon},
         {"alpha", c.alpha},
         {"n_iters", c.n_iters},
         {"norm", c.norm == PgdNorm::max_norm ? "max" : "euclidean"}};
}

void from_json(const nlohmann::json& j, PgdConfig& c) {
    PgdConfig d;
    c.epsilon = j.value("epsilon", d.epsilon);
    c.alpha = j.value("alpha", c.epsilon / 4.0);
    c.n_iters = j.value("n_iters", d.n_iters);
    const auto norm = j.value("norm", std::string("max"));
    if (norm == "max") {
        c.norm = PgdNorm::max_norm;
    } else if (norm == "euclidean") {
        c.norm = PgdNorm::euclidean;
    } else {
        throw ConfigError("pgd.norm must be \"max\" or \"euclidean\", got \"" + norm + "\"");
    }
}

double perturbation_norm(const Tensor& delta, PgdNorm norm) {
    return norm == PgdNorm::max_norm ? max_abs(delta.raw()) : std::sqrt(squared_norm(delta.raw()));
}

namespace {

void project_euclidean(Tensor& delta, double epsilon) {
    double n = std::sqrt(squared_norm(delta.raw()));
    if (n <= epsilon) return;
    delta *= epsilon / n;
    // Rounding can leave the norm a hair above epsilon; shrink until it is not.
    while (std::sqrt(squared_norm(delta.raw())) > epsilon) delta *= std::nextafter(1.0, 0.0);
}

}  // namespace

PgdResult pgd_attack(const SpeakerClassifier& classifier, const Tensor& x, std::size_t y_prime, const PgdConfig& cfg) {
    cfg.validate();
    if (y_prime >= classifier.n_classes()) {
        throw ContractError("pgd_attack: target label " + std::to_string(y_prime) + " out of range");
    }
    PgdResult r;
    r.delta = Tensor::zeros(x.shape());
    if (classifier.is_target(x, y_prime)) {
        r.success = true;
        return r;
    }
    if (cfg.epsilon == 0.0) return r;

    for (std::size_t it = 0; it < cfg.n_iters; ++it) {
        Graph g;
        Var delta = g.leaf(r.delta);
        Var input = add(g.constant(x), delta);
        Var logits = classifier.logits(g, input);
        Var loss = cross_entropy(mean_rows(logits), y_prime);
        g.backward(loss);
        const Tensor& grad = g.grad(delta);
        ++r.iterations;

        if (cfg.norm == PgdNorm::max_norm) {
            for (std::size_t i = 0; i < r.delta.size(); ++i) {
                const double step = grad[i] > 0 ? cfg.alpha : (grad[i] < 0 ? -cfg.alpha : 0.0);
                r.delta[i] = std::clamp(r.delta[i] - step, -cfg.epsilon, cfg.epsilon);
            }
        } else {
            const double gn = std::sqrt(squared_norm(grad.raw()));
            if (gn == 0.0) break;
            for (std::size_t i = 0; i < r.delta.size(); ++i) r.delta[i] -= cfg.alpha * grad[i] / gn;
            project_euclidean(r.delta, cfg.epsilon);
        }

        if (classifier.is_target(x + r.delta, y_prime)) {
            r.success = true;
            break;
        }
    }
    return r;
}

}  // namespace diffattack
