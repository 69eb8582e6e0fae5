#pragma once

#include <cstddef>

#include <json.hpp>

#include "diffattack/classifier.hpp"
#include "diffattack/tensor.hpp"

namespace diffattack {

enum class PgdNorm { max_norm, euclidean };

/// Targeted projected gradient descent on the cross-entropy toward y'.
/// epsilon == 0 is accepted and always yields a zero perturbation.
struct PgdConfig {
    double epsilon = 0.5;
    double alpha = 0.125;
    std::size_t n_iters = 10;
    PgdNorm norm = PgdNorm::max_norm;

    void validate() const;
};

void to_json(nlohmann::json& j, const PgdConfig& c);
void from_json(const nlohmann::json& j, PgdConfig& c);

struct PgdResult {
    Tensor delta;
    std::size_t iterations = 0;  // gradient steps taken
    bool success = false;        // classifier predicts y' at x + delta
};

/// x may hold several frames; the decision uses row-mean logits and delta's norm is taken over all of it.
PgdResult pgd_attack(const SpeakerClassifier& classifier, const Tensor& x, std::size_t y_prime, const PgdConfig& cfg);

double perturbation_norm(const Tensor& delta, PgdNorm norm);

}  // namespace diffattack
