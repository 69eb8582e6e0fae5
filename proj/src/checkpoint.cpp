#include "diffattack/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "diffattack/errors.hpp"

namespace diffattack {

using nlohmann::json;

const Tensor& Checkpoint::get(std::string_view name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    throw FormatError("checkpoint '" + module + "' has no tensor '" + std::string(name) + "'");
}

bool Checkpoint::has(std::string_view name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return true;
    return false;
}

json to_json(const Checkpoint& ckpt) {
    json shapes = json::object();
    json tensors = json::array();
    for (const auto& [name, t] : ckpt.tensors) {
        shapes[name] = t.shape();
        tensors.push_back({{"name", name}, {"values", t.raw()}});
    }
    return {{"format_version", kCheckpointVersion},
            {"module", ckpt.module},
            {"shapes", shapes},
            {"meta", ckpt.meta},
            {"tensors", tensors}};
}

Checkpoint checkpoint_from_json(const json& j, std::string_view expected_module) {
    try {
        const int version = j.at("format_version").get<int>();
        if (version != kCheckpointVersion) {
            throw FormatError("checkpoint format_version " + std::to_string(version) + ", expected " +
                              std::to_string(kCheckpointVersion));
        }
        Checkpoint ckpt;
        ckpt.module = j.at("module").get<std::string>();
        if (!expected_module.empty() && ckpt.module != expected_module) {
            throw FormatError("checkpoint holds module '" + ckpt.module + "', expected '" +
                              std::string(expected_module) + "'");
        }
        ckpt.meta = j.value("meta", json::object());
        const json& shapes = j.at("shapes");
        for (const auto& entry : j.at("tensors")) {
            const auto name = entry.at("name").get<std::string>();
            auto shape = shapes.at(name).get<Shape>();
            auto values = entry.at("values").get<std::vector<double>>();
            try {
                ckpt.put(name, Tensor(std::move(shape), std::move(values)));
            } catch (const ShapeError& e) {
                throw FormatError("checkpoint tensor '" + name + "': " + e.what());
            }
        }
        return ckpt;
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed checkpoint: ") + e.what());
    }
}

std::string serialize(const Checkpoint& ckpt) { return to_json(ckpt).dump() + "\n"; }

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    write_text(path, serialize(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path, std::string_view expected_module) {
    const std::string text = read_text(path);
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return checkpoint_from_json(j, expected_module);
}

void put_mlp(Checkpoint& ckpt, const std::string& prefix, const MlpParams& params) {
    json acts = json::array();
    for (std::size_t i = 0; i < params.layers.size(); ++i) {
        const auto& l = params.layers[i];
        ckpt.put(prefix + "." + std::to_string(i) + ".weight", l.weight);
        ckpt.put(prefix + "." + std::to_string(i) + ".bias", l.bias);
        acts.push_back(l.activation == Activation::tanh ? "tanh" : "identity");
    }
    ckpt.meta[prefix + ".activations"] = acts;
}

MlpParams get_mlp(const Checkpoint& ckpt, const std::string& prefix) {
    const auto key = prefix + ".activations";
    if (!ckpt.meta.contains(key)) throw FormatError("checkpoint has no mlp '" + prefix + "'");
    MlpParams p;
    const auto& acts = ckpt.meta.at(key);
    for (std::size_t i = 0; i < acts.size(); ++i) {
        DenseLayer l;
        l.weight = ckpt.get(prefix + "." + std::to_string(i) + ".weight");
        l.bias = ckpt.get(prefix + "." + std::to_string(i) + ".bias");
        const auto act = acts[i].get<std::string>();
        if (act == "tanh") {
            l.activation = Activation::tanh;
        } else if (act == "identity") {
            l.activation = Activation::identity;
        } else {
            throw FormatError("unknown activation '" + act + "' in " + key);
        }
        p.layers.push_back(std::move(l));
    }
    try {
        p.validate();
    } catch (const ShapeError& e) {
        throw FormatError(std::string("checkpoint mlp '") + prefix + "': " + e.what());
    }
    return p;
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const std::filesystem::path& path, std::string_view text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

}  // namespace diffattack
