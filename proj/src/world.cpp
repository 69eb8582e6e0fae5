#include "diffattack/world.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "diffattack/checkpoint.hpp"
#include "diffattack/errors.hpp"

namespace diffattack {

using nlohmann::json;

void WorldConfig::validate() const {
    if (n_speakers < 2) throw ConfigError("world.n_speakers must be >= 2");
    if (feature_dim < 1) throw ConfigError("world.feature_dim must be >= 1");
    if (content_dim < 1) throw ConfigError("world.content_dim must be >= 1");
    if (frames_per_utterance < 1) throw ConfigError("world.frames_per_utterance must be >= 1");
    if (offset_scale < 0 || warp_strength < 0 || obs_noise < 0) {
        throw ConfigError("world.offset_scale, warp_strength and obs_noise must be nonnegative");
    }
}

void to_json(json& j, const WorldConfig& c) {
    j = json{{"n_speakers", c.n_speakers},     {"feature_dim", c.feature_dim},
             {"content_dim", c.content_dim},   {"offset_scale", c.offset_scale},
             {"warp_strength", c.warp_strength}, {"obs_noise", c.obs_noise},
             {"frames_per_utterance", c.frames_per_utterance}, {"seed", c.seed}};
}

void from_json(const json& j, WorldConfig& c) {
    WorldConfig d;
    c.n_speakers = j.value("n_speakers", d.n_speakers);
    c.feature_dim = j.value("feature_dim", d.feature_dim);
    c.content_dim = j.value("content_dim", d.content_dim);
    c.offset_scale = j.value("offset_scale", d.offset_scale);
    c.warp_strength = j.value("warp_strength", d.warp_strength);
    c.obs_noise = j.value("obs_noise", d.obs_noise);
    c.frames_per_utterance = j.value("frames_per_utterance", d.frames_per_utterance);
    c.seed = j.value("seed", d.seed);
}

const Speaker& World::speaker(std::size_t id) const {
    if (id >= speakers.size()) {
        throw std::out_of_range("unknown speaker " + std::to_string(id) + " (world has " +
                                std::to_string(speakers.size()) + ")");
    }
    return speakers[id];
}

Tensor World::averages(const Tensor& content) const { return matmul(content, transpose(content_projection)); }

Tensor World::render(std::size_t speaker_id, const Tensor& content, Rng& rng) const {
    const Speaker& s = speaker(speaker_id);
    const Tensor xbar0 = averages(content);
    // x = xbar0 (I + G)^T + b + noise, row-wise
    Tensor x = xbar0 + matmul(xbar0, transpose(s.warp));
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto r = x.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) r[j] += s.offset[j] + config.obs_noise * rng.normal();
    }
    return x;
}

World generate_world(const WorldConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const std::size_t d = cfg.feature_dim, k = cfg.content_dim;
    World w;
    w.config = cfg;
    w.content_projection = rng.normal_tensor({d, k});
    for (std::size_t c = 0; c < k; ++c) {
        double norm = 0.0;
        for (std::size_t r = 0; r < d; ++r) norm += w.content_projection(r, c) * w.content_projection(r, c);
        norm = std::sqrt(norm);
        for (std::size_t r = 0; r < d; ++r) w.content_projection(r, c) /= norm;
    }
    const double warp_sd = cfg.warp_strength / std::sqrt(static_cast<double>(d));
    for (std::size_t s = 0; s < cfg.n_speakers; ++s) {
        Speaker sp;
        sp.id = s;
        sp.offset = rng.normal_tensor({d}, cfg.offset_scale);
        sp.warp = rng.normal_tensor({d, d}, warp_sd);
        w.speakers.push_back(std::move(sp));
    }
    return w;
}

Utterance synth_utterance(const World& world, std::size_t speaker_id, Rng& rng) {
    world.speaker(speaker_id);
    Utterance u;
    u.speaker_id = speaker_id;
    u.content = rng.normal_tensor({world.config.frames_per_utterance, world.config.content_dim});
    u.xbar0 = world.averages(u.content);
    u.x = world.render(speaker_id, u.content, rng);
    return u;
}

Dataset make_dataset(const World& world, std::size_t utterances_per_speaker, double split, Rng& rng) {
    if (!(split > 0.0 && split < 1.0)) throw ContractError("dataset split must lie in (0, 1)");
    const auto n_train = static_cast<std::size_t>(std::llround(split * static_cast<double>(utterances_per_speaker)));
    if (n_train < 1 || n_train >= utterances_per_speaker) {
        throw ContractError("split " + std::to_string(split) + " of " + std::to_string(utterances_per_speaker) +
                            " utterances leaves a speaker without train or test data");
    }
    Dataset ds;
    ds.world = world;
    ds.split = split;
    for (std::size_t s = 0; s < world.n_speakers(); ++s) {
        for (std::size_t i = 0; i < utterances_per_speaker; ++i) {
            auto u = synth_utterance(world, s, rng);
            (i < n_train ? ds.train : ds.test).push_back(std::move(u));
        }
    }
    return ds;
}

FrameSet flatten(const std::vector<Utterance>& utts) {
    FrameSet fs;
    if (utts.empty()) return fs;
    std::vector<Tensor> xs, bars;
    for (const auto& u : utts) {
        for (std::size_t i = 0; i < u.frames(); ++i) {
            xs.push_back(Tensor::vector({u.x.row(i).begin(), u.x.row(i).end()}));
            bars.push_back(Tensor::vector({u.xbar0.row(i).begin(), u.xbar0.row(i).end()}));
            fs.labels.push_back(u.speaker_id);
        }
    }
    fs.x = stack_rows(xs);
    fs.xbar0 = stack_rows(bars);
    return fs;
}

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

namespace {

// Compact JSON writer with fixed 17-digit floats; object keys come out sorted.
void write_json(std::string& out, const json& j) {
    switch (j.type()) {
        case json::value_t::object: {
            out += '{';
            bool first = true;
            for (auto it = j.begin(); it != j.end(); ++it) {
                if (!first) out += ',';
                first = false;
                out += json(it.key()).dump();
                out += ':';
                write_json(out, it.value());
            }
            out += '}';
            break;
        }
        case json::value_t::array: {
            out += '[';
            for (std::size_t i = 0; i < j.size(); ++i) {
                if (i) out += ',';
                write_json(out, j[i]);
            }
            out += ']';
            break;
        }
        case json::value_t::number_float:
            out += format_double(j.get<double>());
            break;
        default:
            out += j.dump();
    }
}

json matrix_json(const Tensor& t) {
    json rows = json::array();
    for (std::size_t i = 0; i < t.rows(); ++i) rows.push_back(std::vector<double>(t.row(i).begin(), t.row(i).end()));
    return rows;
}

Tensor matrix_from_json(const json& j, std::size_t cols, const std::string& field, std::size_t line) {
    std::vector<double> values;
    std::size_t rows = 0;
    for (const auto& r : j) {
        auto v = r.get<std::vector<double>>();
        if (v.size() != cols) {
            throw FormatError("line " + std::to_string(line) + ": field '" + field + "' row of width " +
                              std::to_string(v.size()) + ", expected " + std::to_string(cols));
        }
        values.insert(values.end(), v.begin(), v.end());
        ++rows;
    }
    return Tensor({rows, cols}, std::move(values));
}

}  // namespace

json world_header(const World& world, double split) {
    json speakers = json::array();
    for (const auto& s : world.speakers) {
        speakers.push_back({{"id", s.id}, {"offset", s.offset.raw()}, {"warp", matrix_json(s.warp)}});
    }
    return {{"format_version", kDatasetVersion},
            {"world", world.config},
            {"W_c", matrix_json(world.content_projection)},
            {"speakers", speakers},
            {"split", split}};
}

std::string World::fingerprint() const {
    std::string text;
    json j = world_header(*this, 0.0);
    j.erase("split");
    write_json(text, j);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(text)));
    return buf;
}

std::string serialize_dataset(const Dataset& ds) {
    std::string out;
    write_json(out, world_header(ds.world, ds.split));
    out += '\n';
    auto emit = [&](const Utterance& u, const char* part) {
        json frames = json::array();
        for (std::size_t i = 0; i < u.frames(); ++i) {
            frames.push_back({{"x", std::vector<double>(u.x.row(i).begin(), u.x.row(i).end())},
                              {"xbar0", std::vector<double>(u.xbar0.row(i).begin(), u.xbar0.row(i).end())},
                              {"c", std::vector<double>(u.content.row(i).begin(), u.content.row(i).end())}});
        }
        write_json(out, json{{"speaker_id", u.speaker_id}, {"split", part}, {"frames", frames}});
        out += '\n';
    };
    for (const auto& u : ds.train) emit(u, "train");
    for (const auto& u : ds.test) emit(u, "test");
    return out;
}

Dataset parse_dataset(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    std::string field;
    Dataset ds;
    try {
        if (!std::getline(in, line)) throw FormatError("dataset: empty file");
        ++line_no;
        const json header = json::parse(line);
        field = "format_version";
        const int version = header.at(field).get<int>();
        if (version != kDatasetVersion) {
            throw FormatError("line 1: dataset format_version " + std::to_string(version) + ", expected " +
                              std::to_string(kDatasetVersion));
        }
        field = "world";
        ds.world.config = header.at(field).get<WorldConfig>();
        ds.world.config.validate();
        const std::size_t d = ds.world.config.feature_dim, k = ds.world.config.content_dim;
        field = "W_c";
        ds.world.content_projection = matrix_from_json(header.at(field), k, field, line_no);
        field = "speakers";
        for (const auto& s : header.at(field)) {
            Speaker sp;
            sp.id = s.at("id").get<std::size_t>();
            sp.offset = Tensor::vector(s.at("offset").get<std::vector<double>>());
            sp.warp = matrix_from_json(s.at("warp"), d, "speakers.warp", line_no);
            ds.world.speakers.push_back(std::move(sp));
        }
        field = "split";
        ds.split = header.at(field).get<double>();
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            const json j = json::parse(line);
            Utterance u;
            field = "speaker_id";
            u.speaker_id = j.at(field).get<std::size_t>();
            if (u.speaker_id >= ds.world.speakers.size()) {
                throw FormatError("line " + std::to_string(line_no) + ": speaker_id out of range");
            }
            field = "frames";
            json xs = json::array(), bars = json::array(), cs = json::array();
            for (const auto& f : j.at(field)) {
                xs.push_back(f.at("x"));
                bars.push_back(f.at("xbar0"));
                cs.push_back(f.at("c"));
            }
            u.x = matrix_from_json(xs, d, "frames.x", line_no);
            u.xbar0 = matrix_from_json(bars, d, "frames.xbar0", line_no);
            u.content = matrix_from_json(cs, k, "frames.c", line_no);
            field = "split";
            const auto part = j.at(field).get<std::string>();
            if (part == "train") {
                ds.train.push_back(std::move(u));
            } else if (part == "test") {
                ds.test.push_back(std::move(u));
            } else {
                throw FormatError("line " + std::to_string(line_no) + ": unknown split '" + part + "'");
            }
        }
    } catch (const json::exception& e) {
        throw FormatError("line " + std::to_string(line_no) + ": field '" + field + "': " + e.what());
    } catch (const ConfigError& e) {
        throw FormatError("line " + std::to_string(line_no) + ": " + e.what());
    }
    return ds;
}

void save_dataset(const std::filesystem::path& path, const Dataset& ds) { write_text(path, serialize_dataset(ds)); }

Dataset load_dataset(const std::filesystem::path& path) { return parse_dataset(read_text(path)); }

}  // namespace diffattack
