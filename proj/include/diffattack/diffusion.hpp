#pragma once

#include <cstddef>
#include <functional>
#include <optional>

#include "diffattack/rng.hpp"
#include "diffattack/tensor.hpp"

namespace diffattack {

inline constexpr double kDefaultTMin = 0.01;

/// Linear rate beta_t = beta0 + t (beta1 - beta0) on t in [0, 1].
struct NoiseSchedule {
    double beta0 = 0.05;
    double beta1 = 20.0;

    void validate() const;
};

double beta_at(const NoiseSchedule& sched, double t);

/// B(t) = integral of beta over [0, t].
double noise_integral(const NoiseSchedule& sched, double t);

/// Kernel variance 1 - exp(-B(t)); also the score-matching weight.
double lambda_at(const NoiseSchedule& sched, double t);

/// Mean of the forward kernel: xbar0 + (x0 - xbar0) exp(-B(t)/2).
Tensor kernel_mean(const Tensor& x0, const Tensor& xbar0, double t, const NoiseSchedule& sched);

struct ForwardDraw {
    double t = 0.0;
    Tensor x_t;
    Tensor mu_t;
    double lambda_t = 0.0;
    Tensor true_score;
};

/// One draw of x_t from the closed-form transition kernel of the forward SDE
///   dx = 1/2 beta_t (xbar0 - x) dt + sqrt(beta_t) dW.
ForwardDraw forward_sample(const Tensor& x0, const Tensor& xbar0, double t, const NoiseSchedule& sched, Rng& rng,
                           double t_min = kDefaultTMin);

/// Gradient of the Gaussian kernel log-density: -(x_t - mu_t) / lambda_t.
Tensor analytic_score(const Tensor& x_t, const Tensor& mu_t, double lambda_t);

struct ReverseConfig {
    std::size_t n_steps = 100;
    bool stochastic = true;
    double t_min = kDefaultTMin;

    void validate() const;
};

/// score(x, t) for the current state; x has the shape of xbar0.
using ScoreFn = std::function<Tensor(const Tensor& x, double t)>;

/// Euler-Maruyama integration of the reverse SDE from t = 1 down to t_min.
/// Without x_init the start state is drawn from Normal(xbar0, lambda_1 I).
Tensor reverse_integrate(const ScoreFn& score, const Tensor& xbar0, const ReverseConfig& cfg,
                         const NoiseSchedule& sched, Rng& rng, std::optional<Tensor> x_init = std::nullopt);

}  // namespace diffattack
