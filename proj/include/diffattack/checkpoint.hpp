#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "diffattack/mlp.hpp"
#include "diffattack/tensor.hpp"

namespace diffattack {

inline constexpr int kCheckpointVersion = 1;

/// Named tensors plus free-form metadata, serialized as versioned JSON.
/// The same parameters always serialize to the same bytes.
struct Checkpoint {
    std::string module;
    std::vector<std::pair<std::string, Tensor>> tensors;
    nlohmann::json meta = nlohmann::json::object();

    void put(std::string name, Tensor t) { tensors.emplace_back(std::move(name), std::move(t)); }
    const Tensor& get(std::string_view name) const;
    bool has(std::string_view name) const;
};

nlohmann::json to_json(const Checkpoint& ckpt);
Checkpoint checkpoint_from_json(const nlohmann::json& j, std::string_view expected_module);

std::string serialize(const Checkpoint& ckpt);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path, std::string_view expected_module);

void put_mlp(Checkpoint& ckpt, const std::string& prefix, const MlpParams& params);
MlpParams get_mlp(const Checkpoint& ckpt, const std::string& prefix);

// Small file helpers shared by the on-disk formats.
std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view text);

}  // namespace diffattack
