#include "diffattack/training.hpp"

#include <algorithm>

#include "diffattack/errors.hpp"

namespace diffattack {

Tensor take_rows(const Tensor& source, const std::vector<std::size_t>& index) {
    const std::size_t m = source.cols();
    Tensor out({index.size(), m});
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= source.rows()) throw ContractError("take_rows: index out of range");
        auto src = source.row(index[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

std::vector<std::size_t> sample_batch(std::size_t population, std::size_t batch, Rng& rng) {
    if (population == 0) throw ContractError("cannot sample a batch from an empty set");
    std::vector<std::size_t> idx(batch);
    for (auto& i : idx) i = rng.index(population);
    return idx;
}

}  // namespace diffattack
