#pragma once

#include <cstddef>
#include <vector>

#include "diffattack/rng.hpp"
#include "diffattack/tensor.hpp"

namespace diffattack {

/// Rows of `source` picked by `index`.
Tensor take_rows(const Tensor& source, const std::vector<std::size_t>& index);

/// Uniform minibatch indices with replacement.
std::vector<std::size_t> sample_batch(std::size_t population, std::size_t batch, Rng& rng);

}  // namespace diffattack
