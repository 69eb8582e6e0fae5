#include "diffattack/diffusion.hpp"

#include <cmath>
#include <string>

#include "diffattack/errors.hpp"

namespace diffattack {

void NoiseSchedule::validate() const {
    if (!(beta0 > 0.0) || !(beta0 <= beta1) || !std::isfinite(beta1)) {
        throw ContractError("noise schedule needs 0 < beta0 <= beta1, got beta0=" + std::to_string(beta0) +
                            " beta1=" + std::to_string(beta1));
    }
}

namespace {

void check_time(double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw ContractError("diffusion time " + std::to_string(t) + " outside [0, 1]");
}

}  // namespace

double beta_at(const NoiseSchedule& sched, double t) {
    check_time(t);
    return sched.beta0 + t * (sched.beta1 - sched.beta0);
}

double noise_integral(const NoiseSchedule& sched, double t) {
    check_time(t);
    return sched.beta0 * t + 0.5 * (sched.beta1 - sched.beta0) * t * t;
}

double lambda_at(const NoiseSchedule& sched, double t) { return 1.0 - std::exp(-noise_integral(sched, t)); }

Tensor kernel_mean(const Tensor& x0, const Tensor& xbar0, double t, const NoiseSchedule& sched) {
    require_same_shape(x0, xbar0, "kernel_mean");
    const double decay = std::exp(-0.5 * noise_integral(sched, t));
    Tensor mu = xbar0;
    for (std::size_t i = 0; i < mu.size(); ++i) mu[i] += (x0[i] - xbar0[i]) * decay;
    return mu;
}

ForwardDraw forward_sample(const Tensor& x0, const Tensor& xbar0, double t, const NoiseSchedule& sched, Rng& rng,
                           double t_min) {
    require_same_shape(x0, xbar0, "forward_sample");
    if (t < t_min) {
        throw ContractError("forward_sample at t=" + std::to_string(t) + " below t_min=" + std::to_string(t_min));
    }
    ForwardDraw d;
    d.t = t;
    d.mu_t = kernel_mean(x0, xbar0, t, sched);
    d.lambda_t = lambda_at(sched, t);
    const double sd = std::sqrt(d.lambda_t);
    d.x_t = d.mu_t;
    for (double& v : d.x_t.raw()) v += sd * rng.normal();
    d.true_score = analytic_score(d.x_t, d.mu_t, d.lambda_t);
    return d;
}

Tensor analytic_score(const Tensor& x_t, const Tensor& mu_t, double lambda_t) {
    require_same_shape(x_t, mu_t, "analytic_score");
    if (!(lambda_t > 0.0)) throw ContractError("analytic_score needs lambda_t > 0, got " + std::to_string(lambda_t));
    Tensor s = x_t;
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = -(x_t[i] - mu_t[i]) / lambda_t;
    return s;
}

void ReverseConfig::validate() const {
    if (n_steps < 1) throw ContractError("reverse sampler needs n_steps >= 1");
    if (!(t_min > 0.0 && t_min < 1.0)) throw ContractError("reverse sampler needs 0 < t_min < 1");
}

Tensor reverse_integrate(const ScoreFn& score, const Tensor& xbar0, const ReverseConfig& cfg,
                         const NoiseSchedule& sched, Rng& rng, std::optional<Tensor> x_init) {
    cfg.validate();
    Tensor x;
    if (x_init) {
        require_same_shape(*x_init, xbar0, "reverse_integrate x_init");
        x = std::move(*x_init);
    } else {
        const double sd = std::sqrt(lambda_at(sched, 1.0));
        x = xbar0;
        for (double& v : x.raw()) v += sd * rng.normal();
    }
    const double h = (1.0 - cfg.t_min) / static_cast<double>(cfg.n_steps);
    for (std::size_t i = 0; i < cfg.n_steps; ++i) {
        const double t = 1.0 - static_cast<double>(i) * h;
        const double beta = beta_at(sched, t);
        const Tensor s = score(x, t);
        require_same_shape(s, x, "reverse_integrate score");
        const double noise_scale = std::sqrt(beta * h);
        for (std::size_t j = 0; j < x.size(); ++j) {
            const double drift = 0.5 * (xbar0[j] - x[j]) - s[j];
            x[j] -= h * beta * drift;
            if (cfg.stochastic) x[j] += noise_scale * rng.normal();
        }
        if (!x.all_finite()) throw DivergenceError("reverse integration state became non-finite", i);
    }
    return x;
}

}  // namespace diffattack
