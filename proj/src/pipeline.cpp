#include "diffattack/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>

#include "diffattack/checkpoint.hpp"
#include "diffattack/errors.hpp"
#include "diffattack/rng.hpp"

namespace diffattack {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- config

// Found by argument-dependent lookup, so these cannot live in the anonymous namespace.
void to_json(json& j, const NoiseSchedule& s) { j = {{"beta0", s.beta0}, {"beta1", s.beta1}}; }
void to_json(json& j, const ReverseConfig& r) {
    j = {{"n_steps", r.n_steps}, {"stochastic", r.stochastic}, {"t_min", r.t_min}};
}

namespace {

std::string gate_name(GateInput g) { return g == GateInput::model_estimate ? "model_estimate" : "forward_sample"; }

// Schema: section -> field -> kind. Top-level scalars live under "".
const std::map<std::string, std::map<std::string, std::string>>& schema() {
    static const std::map<std::string, std::map<std::string, std::string>> s{
        {"world",
         {{"n_speakers", "uint"}, {"feature_dim", "uint"}, {"content_dim", "uint"}, {"offset_scale", "number"},
          {"warp_strength", "number"}, {"obs_noise", "number"}, {"frames_per_utterance", "uint"}, {"seed", "uint"}}},
        {"dataset", {{"utterances_per_speaker", "uint"}, {"split", "number"}}},
        {"schedule", {{"beta0", "number"}, {"beta1", "number"}}},
        {"encoder",
         {{"hidden", "uint_array"}, {"steps", "uint"}, {"batch", "uint"}, {"learning_rate", "number"},
          {"log_every", "uint"}}},
        {"classifier",
         {{"hidden", "uint_array"}, {"steps", "uint"}, {"batch", "uint"}, {"learning_rate", "number"},
          {"noise_augment", "bool"}, {"log_every", "uint"}}},
        {"decoder",
         {{"hidden", "uint_array"}, {"embedding_dim", "uint"}, {"steps", "uint"}, {"batch", "uint"},
          {"learning_rate", "number"}, {"log_every", "uint"}, {"t_min", "number"}}},
        {"variant", {{"w_spk", "number"}, {"w_adv", "number"}, {"gate_input", "string"}}},
        {"pgd", {{"epsilon", "number"}, {"alpha", "number"}, {"n_iters", "uint"}, {"norm", "string"}}},
        {"reverse", {{"n_steps", "uint"}, {"stochastic", "bool"}, {"t_min", "number"}}},
        {"eval", {{"targets_per_source", "uint"}}},
        {"", {{"seed", "uint"}, {"out_dir", "string"}, {"variants", "string_array"}}},
    };
    return s;
}

bool has_kind(const json& v, const std::string& kind) {
    if (kind == "uint") return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
    if (kind == "number") return v.is_number();
    if (kind == "bool") return v.is_boolean();
    if (kind == "string") return v.is_string();
    if (kind == "uint_array" || kind == "string_array") {
        if (!v.is_array()) return false;
        for (const auto& e : v) {
            if (!has_kind(e, kind == "uint_array" ? "uint" : "string")) return false;
        }
        return true;
    }
    return false;
}

void check_hyper(std::vector<std::string>& errors, const std::string& section, const std::vector<std::size_t>& hidden,
                 std::size_t steps, std::size_t batch, double lr) {
    for (auto h : hidden) {
        if (h == 0) errors.push_back(section + ".hidden: layer widths must be >= 1");
    }
    if (steps < 1) errors.push_back(section + ".steps: must be >= 1");
    if (batch < 1) errors.push_back(section + ".batch: must be >= 1");
    if (!(lr > 0.0)) errors.push_back(section + ".learning_rate: must be > 0");
}

}  // namespace

json to_json(const RunConfig& cfg) {
    json j;
    j["world"] = cfg.world;
    j["dataset"] = {{"utterances_per_speaker", cfg.dataset.utterances_per_speaker}, {"split", cfg.dataset.split}};
    j["schedule"] = cfg.schedule;
    j["encoder"] = cfg.encoder;
    j["classifier"] = cfg.classifier;
    j["decoder"] = cfg.decoder;
    j["variants"] = cfg.variants;
    j["variant"] = {{"w_spk", cfg.variant.w_spk},
                    {"w_adv", cfg.variant.w_adv},
                    {"gate_input", gate_name(cfg.variant.gate_input)}};
    j["pgd"] = cfg.pgd;
    j["reverse"] = cfg.reverse;
    j["eval"] = {{"targets_per_source", cfg.eval.targets_per_source}};
    j["seed"] = cfg.seed;
    j["out_dir"] = cfg.out_dir.string();
    return j;
}

RunConfig parse_run_config(const json& j) {
    std::vector<std::string> errors;
    if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");

    const auto& sch = schema();
    for (auto it = j.begin(); it != j.end(); ++it) {
        const auto& top = sch.at("");
        if (auto f = top.find(it.key()); f != top.end()) {
            if (!has_kind(it.value(), f->second)) errors.push_back(it.key() + ": expected " + f->second);
            continue;
        }
        auto sec = sch.find(it.key());
        if (sec == sch.end() || sec->first.empty()) {
            errors.push_back(it.key() + ": unknown field");
            continue;
        }
        if (!it.value().is_object()) {
            errors.push_back(it.key() + ": expected object");
            continue;
        }
        for (auto f = it.value().begin(); f != it.value().end(); ++f) {
            auto kind = sec->second.find(f.key());
            if (kind == sec->second.end()) {
                errors.push_back(it.key() + "." + f.key() + ": unknown field");
            } else if (!has_kind(f.value(), kind->second)) {
                errors.push_back(it.key() + "." + f.key() + ": expected " + kind->second);
            }
        }
    }
    if (!j.contains("seed")) errors.push_back("seed: required");
    if (!errors.empty()) {
        std::string msg = "invalid config:";
        for (const auto& e : errors) msg += "\n  " + e;
        throw ConfigError(msg);
    }

    RunConfig c;
    const json empty = json::object();
    auto section = [&](const char* name) -> const json& { return j.contains(name) ? j.at(name) : empty; };
    // Each section is parsed and validated on its own so every bad section is reported.
    auto guarded = [&](const std::string& name, auto&& fn) {
        try {
            fn();
        } catch (const std::exception& e) {
            errors.push_back(name + ": " + e.what());
        }
    };
    guarded("world", [&] {
        c.world = section("world").get<WorldConfig>();
        c.world.validate();
    });
    guarded("dataset", [&] {
        const auto& s = section("dataset");
        c.dataset.utterances_per_speaker = s.value("utterances_per_speaker", c.dataset.utterances_per_speaker);
        c.dataset.split = s.value("split", c.dataset.split);
        if (!(c.dataset.split > 0.0 && c.dataset.split < 1.0)) throw ConfigError("split must lie in (0, 1)");
        const auto n = c.dataset.utterances_per_speaker;
        const auto n_train = static_cast<std::size_t>(std::llround(c.dataset.split * static_cast<double>(n)));
        if (n_train < 1 || n_train >= n) throw ConfigError("split leaves a speaker without train or test data");
    });
    guarded("schedule", [&] {
        const auto& s = section("schedule");
        c.schedule.beta0 = s.value("beta0", c.schedule.beta0);
        c.schedule.beta1 = s.value("beta1", c.schedule.beta1);
        c.schedule.validate();
    });
    guarded("encoder", [&] {
        c.encoder = section("encoder").get<EncoderHyper>();
        check_hyper(errors, "encoder", c.encoder.hidden, c.encoder.steps, c.encoder.batch, c.encoder.learning_rate);
    });
    guarded("classifier", [&] {
        c.classifier = section("classifier").get<ClassifierHyper>();
        check_hyper(errors, "classifier", c.classifier.hidden, c.classifier.steps, c.classifier.batch,
                    c.classifier.learning_rate);
    });
    guarded("decoder", [&] {
        c.decoder = section("decoder").get<DecoderHyper>();
        check_hyper(errors, "decoder", c.decoder.hidden, c.decoder.steps, c.decoder.batch, c.decoder.learning_rate);
        if (c.decoder.embedding_dim < 1) errors.push_back("decoder.embedding_dim: must be >= 1");
        if (!(c.decoder.t_min > 0.0 && c.decoder.t_min < 1.0)) errors.push_back("decoder.t_min: must lie in (0, 1)");
    });
    guarded("variants", [&] {
        if (j.contains("variants")) c.variants = j.at("variants").get<std::vector<std::string>>();
        std::vector<VariantKind> seen;
        for (const auto& v : c.variants) {
            const auto kind = parse_variant(v);
            for (auto s : seen) {
                if (s == kind) throw ConfigError("duplicate variant '" + v + "'");
            }
            seen.push_back(kind);
        }
    });
    guarded("variant", [&] {
        const auto& s = section("variant");
        c.variant.w_spk = s.value("w_spk", c.variant.w_spk);
        c.variant.w_adv = s.value("w_adv", c.variant.w_adv);
        const auto g = s.value("gate_input", gate_name(c.variant.gate_input));
        if (g == "model_estimate") {
            c.variant.gate_input = GateInput::model_estimate;
        } else if (g == "forward_sample") {
            c.variant.gate_input = GateInput::forward_sample;
        } else {
            throw ConfigError("gate_input must be \"model_estimate\" or \"forward_sample\"");
        }
        if (!(c.variant.w_spk >= 0.0) || !(c.variant.w_adv >= 0.0)) throw ConfigError("weights must be >= 0");
    });
    guarded("pgd", [&] {
        c.pgd = section("pgd").get<PgdConfig>();
        c.pgd.validate();
    });
    guarded("reverse", [&] {
        const auto& s = section("reverse");
        c.reverse.n_steps = s.value("n_steps", c.reverse.n_steps);
        c.reverse.stochastic = s.value("stochastic", c.reverse.stochastic);
        c.reverse.t_min = s.value("t_min", c.reverse.t_min);
        c.reverse.validate();
    });
    guarded("eval", [&] {
        c.eval.targets_per_source = section("eval").value("targets_per_source", c.eval.targets_per_source);
        if (c.eval.targets_per_source >= c.world.n_speakers) {
            throw ConfigError("targets_per_source must be < world.n_speakers");
        }
    });
    c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();

    if (!errors.empty()) {
        std::string msg = "invalid config:";
        for (const auto& e : errors) msg += "\n  " + e;
        throw ConfigError(msg);
    }
    return c;
}

RunConfig load_run_config(const fs::path& path) {
    std::string text;
    try {
        text = read_text(path);
    } catch (const std::exception& e) {
        throw ConfigError("cannot read config " + path.string() + ": " + e.what());
    }
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return parse_run_config(j);
}

std::uint64_t stage_seed(const RunConfig& cfg, const std::string& tag) { return derive_seed(cfg.seed, tag); }

TrainVariant make_variant(const RunConfig& cfg, VariantKind kind) {
    switch (kind) {
        case VariantKind::vanilla:
            return TrainVariant::vanilla();
        case VariantKind::spk_constraint:
            return TrainVariant::spk_constraint(cfg.variant.w_spk);
        case VariantKind::adv_constraint: {
            auto v = TrainVariant::adv_constraint(cfg.pgd, cfg.variant.w_adv);
            v.gate_input = cfg.variant.gate_input;
            return v;
        }
    }
    throw ContractError("unknown variant");
}

// ---------------------------------------------------------------- files

fs::path dataset_path(const RunConfig& cfg) { return cfg.out_dir / "dataset.jsonl"; }
fs::path encoder_path(const RunConfig& cfg) { return cfg.out_dir / "encoder.json"; }
fs::path classifier_path(const RunConfig& cfg) { return cfg.out_dir / "classifier.json"; }
fs::path decoder_path(const RunConfig& cfg, VariantKind v) {
    return cfg.out_dir / ("decoder_" + variant_name(v) + ".json");
}
fs::path attack_path(const RunConfig& cfg, MethodId m) { return cfg.out_dir / ("attack_" + method_name(m) + ".json"); }
fs::path report_csv_path(const RunConfig& cfg) { return cfg.out_dir / "report.csv"; }
fs::path manifest_path(const fs::path& artifact) { return fs::path(artifact.string() + ".manifest.json"); }

std::string hash_text(const std::string& text) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(text)));
    return buf;
}

std::string hash_file(const fs::path& path) { return hash_text(read_text(path)); }

namespace {

// Config sections each stage depends on, upstream sections included.
json stage_config(const RunConfig& cfg, const std::string& stage) {
    const json all = to_json(cfg);
    json j;
    auto take = [&](std::initializer_list<const char*> keys) {
        for (auto k : keys) j[k] = all.at(k);
    };
    take({"world", "dataset", "seed"});
    j["world"].erase("seed");
    if (stage == "world") return j;
    if (stage == "encoder") {
        take({"encoder"});
        return j;
    }
    take({"classifier", "schedule"});
    if (stage == "classifier") return j;
    take({"decoder"});
    if (stage == "decoder:vanilla") return j;
    if (stage == "decoder:spk") {
        j["w_spk"] = cfg.variant.w_spk;
        return j;
    }
    if (stage == "decoder:adv") {
        take({"pgd"});
        j["w_adv"] = cfg.variant.w_adv;
        j["gate_input"] = all["variant"]["gate_input"];
        return j;
    }
    // attack and eval see everything except where results are written
    j = all;
    j["world"].erase("seed");
    j.erase("out_dir");
    return j;
}

std::string config_hash(const RunConfig& cfg, const std::string& stage) {
    return hash_text(stage_config(cfg, stage).dump());
}

struct Stage {
    std::string name;
    std::string hash;
    std::vector<fs::path> inputs;
    std::vector<fs::path> outputs;
};

json input_hashes(const Stage& s) {
    json j = json::object();
    for (const auto& p : s.inputs) j[p.filename().string()] = hash_file(p);
    return j;
}

json read_manifest(const fs::path& artifact) {
    const auto mp = manifest_path(artifact);
    if (!fs::exists(mp)) return nullptr;
    json m;
    try {
        m = json::parse(read_text(mp));
    } catch (const json::exception& e) {
        throw ManifestError("unreadable manifest " + mp.string() + ": " + e.what());
    }
    if (m.value("format_version", -1) != kManifestVersion) {
        throw ManifestError("manifest " + mp.string() + " has format_version " +
                            m.value("format_version", json(-1)).dump() + ", expected " +
                            std::to_string(kManifestVersion));
    }
    return m;
}

bool up_to_date(const Stage& s) {
    json inputs;
    try {
        inputs = input_hashes(s);
    } catch (const std::exception&) {
        return false;
    }
    for (const auto& out : s.outputs) {
        if (!fs::exists(out)) return false;
        const json m = read_manifest(out);
        if (m.is_null()) return false;
        if (m.value("config_hash", "") != s.hash || m.value("inputs", json()) != inputs) return false;
        if (m.value("output_hash", "") != hash_file(out)) return false;
    }
    return true;
}

void write_manifest(const Stage& s, const fs::path& out, const RunConfig& cfg, const std::string& fingerprint,
                    const json& stats = json::object()) {
    json m{{"format_version", kManifestVersion},
           {"stage", s.name},
           {"config_hash", s.hash},
           {"seed", cfg.seed},
           {"world_fingerprint", fingerprint},
           {"inputs", input_hashes(s)},
           {"output", out.filename().string()},
           {"output_hash", hash_file(out)},
           {"stats", stats}};
    write_text(manifest_path(out), m.dump(2) + "\n");
}

// Loads the manifest of an upstream artifact and checks it still describes this run.
json require_upstream(const RunConfig& cfg, const fs::path& artifact, const std::string& stage,
                      const std::string& fingerprint) {
    if (!fs::exists(artifact)) {
        throw ManifestError("missing artifact " + artifact.string() + "; run the " + stage + " stage first");
    }
    const json m = read_manifest(artifact);
    if (m.is_null()) throw ManifestError("artifact " + artifact.string() + " has no manifest");
    if (m.value("output_hash", "") != hash_file(artifact)) {
        throw ManifestError("artifact " + artifact.string() + " was modified after its manifest was written");
    }
    if (!fingerprint.empty() && m.value("world_fingerprint", "") != fingerprint) {
        throw ManifestError("artifact " + artifact.string() + " belongs to a different world");
    }
    if (m.value("config_hash", "") != config_hash(cfg, stage)) {
        throw ManifestError("artifact " + artifact.string() + " was built from a different config; rerun the " +
                            stage + " stage");
    }
    return m;
}

Dataset load_run_dataset(const RunConfig& cfg) {
    require_upstream(cfg, dataset_path(cfg), "world", "");
    Dataset ds = load_dataset(dataset_path(cfg));
    const json m = read_manifest(dataset_path(cfg));
    if (m.value("world_fingerprint", "") != ds.world.fingerprint()) {
        throw ManifestError("dataset " + dataset_path(cfg).string() + " does not match its manifest's world");
    }
    return ds;
}

class Timer {
  public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

  private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void logf(const StageOptions& opt, const char* fmt, double a = 0, double b = 0, double c = 0) {
    if (!opt.log) return;
    char buf[256];
    std::snprintf(buf, sizeof buf, fmt, a, b, c);
    *opt.log << buf << '\n';
}

void log_skip(const StageOptions& opt, const std::string& stage) {
    if (opt.log) *opt.log << stage << ": up to date\n";
}

std::string decoder_stage(VariantKind v) { return "decoder:" + variant_name(v); }

}  // namespace

// ---------------------------------------------------------------- stages

void cmd_world(const RunConfig& cfg, const StageOptions& opt) {
    Stage s{"world", config_hash(cfg, "world"), {}, {dataset_path(cfg)}};
    if (up_to_date(s)) return log_skip(opt, s.name);
    Timer timer;
    WorldConfig wc = cfg.world;
    wc.seed = stage_seed(cfg, "world");
    const World world = generate_world(wc);
    Rng rng(stage_seed(cfg, "dataset"));
    const Dataset ds = make_dataset(world, cfg.dataset.utterances_per_speaker, cfg.dataset.split, rng);
    save_dataset(dataset_path(cfg), ds);
    write_manifest(s, dataset_path(cfg), cfg, world.fingerprint());
    logf(opt, "world: %.0f train / %.0f test utterances (%.1fs)", static_cast<double>(ds.train.size()),
         static_cast<double>(ds.test.size()), timer.seconds());
}

void cmd_train_encoder(const RunConfig& cfg, const StageOptions& opt) {
    Stage s{"encoder", config_hash(cfg, "encoder"), {dataset_path(cfg)}, {encoder_path(cfg)}};
    const Dataset ds = load_run_dataset(cfg);
    if (up_to_date(s)) return log_skip(opt, s.name);
    Timer timer;
    Rng rng(stage_seed(cfg, "encoder"));
    const auto trained = train_encoder(ds, cfg.encoder, rng);
    save_checkpoint(encoder_path(cfg), to_checkpoint(trained.params));
    write_manifest(s, encoder_path(cfg), cfg, ds.world.fingerprint(),
                   {{"initial_loss", trained.initial_loss}, {"heldout_loss", trained.heldout_loss}});
    logf(opt, "encoder: mse %.4g -> held-out %.4g (%.1fs)", trained.initial_loss, trained.heldout_loss,
         timer.seconds());
}

void cmd_train_classifier(const RunConfig& cfg, const StageOptions& opt) {
    Stage s{"classifier", config_hash(cfg, "classifier"), {dataset_path(cfg)}, {classifier_path(cfg)}};
    const Dataset ds = load_run_dataset(cfg);
    if (up_to_date(s)) return log_skip(opt, s.name);
    Timer timer;
    Rng rng(stage_seed(cfg, "classifier"));
    const auto trained = train_classifier(ds, cfg.classifier, rng, cfg.schedule);
    save_checkpoint(classifier_path(cfg), to_checkpoint(trained.params));
    write_manifest(s, classifier_path(cfg), cfg, ds.world.fingerprint(),
                   {{"frame_accuracy", trained.heldout.frame_accuracy},
                    {"utterance_accuracy", trained.heldout.utterance_accuracy}});
    logf(opt, "classifier: held-out accuracy %.3f frame / %.3f utterance (%.1fs)", trained.heldout.frame_accuracy,
         trained.heldout.utterance_accuracy, timer.seconds());
}

void cmd_train_decoder(const RunConfig& cfg, VariantKind variant, const StageOptions& opt) {
    const auto stage = decoder_stage(variant);
    Stage s{stage, config_hash(cfg, stage), {dataset_path(cfg), classifier_path(cfg)}, {decoder_path(cfg, variant)}};
    const Dataset ds = load_run_dataset(cfg);
    const auto fp = ds.world.fingerprint();
    require_upstream(cfg, classifier_path(cfg), "classifier", fp);
    if (up_to_date(s)) return log_skip(opt, s.name);
    Timer timer;
    const MlpSpeakerClassifier victim(classifier_from_checkpoint(load_checkpoint(classifier_path(cfg), "classifier")));
    // Every variant starts from the same stream so degenerate gates reproduce the vanilla run exactly.
    Rng rng(stage_seed(cfg, "decoder"));
    const auto trained = train_decoder(ds, victim, make_variant(cfg, variant), cfg.decoder, cfg.schedule, rng);
    save_checkpoint(decoder_path(cfg, variant), to_checkpoint(trained.params));
    json stats{{"max_delta_norm", trained.max_delta_norm}, {"pgd_calls", trained.pgd_calls}};
    if (!trained.history.empty()) {
        stats["first"] = {{"loss", trained.history.front().loss}, {"gate_rate", trained.history.front().gate_rate}};
        stats["last"] = {{"loss", trained.history.back().loss}, {"gate_rate", trained.history.back().gate_rate}};
    }
    write_manifest(s, decoder_path(cfg, variant), cfg, fp, stats);
    if (opt.log) *opt.log << stage << ": ";
    logf(opt, "loss %.4g -> %.4g (%.1fs)", trained.history.empty() ? 0.0 : trained.history.front().loss,
         trained.history.empty() ? 0.0 : trained.history.back().loss, timer.seconds());
}

DecoderStats load_decoder_stats(const RunConfig& cfg, VariantKind variant) {
    const json m = read_manifest(decoder_path(cfg, variant));
    if (m.is_null()) throw ManifestError("no manifest for " + decoder_path(cfg, variant).string());
    const json& st = m.at("stats");
    DecoderStats s;
    s.max_delta_norm = st.value("max_delta_norm", 0.0);
    s.pgd_calls = st.value("pgd_calls", std::size_t{0});
    if (st.contains("first")) s.first_gate_rate = st["first"].value("gate_rate", 0.0);
    if (st.contains("last")) s.last_gate_rate = st["last"].value("gate_rate", 0.0);
    return s;
}

std::string serialize_method_run(const MethodRun& run, std::uint64_t seed) {
    json jobs = json::array();
    for (std::size_t i = 0; i < run.jobs.size(); ++i) {
        const auto& job = run.jobs[i];
        const auto& g = run.outputs.at(i);
        jobs.push_back({{"source_index", job.source_index},
                        {"source_speaker", job.source_speaker},
                        {"target", job.target},
                        {"prediction", g.prediction},
                        {"frames", g.frames.raw()},
                        {"perturbation", g.perturbation.raw()},
                        {"shape", g.frames.shape()}});
    }
    json j{{"format_version", kAttackVersion},
           {"method", method_name(run.method)},
           {"seed", seed},
           {"max_pgd_norm", run.max_pgd_norm},
           {"pgd_calls", run.pgd_calls},
           {"jobs", jobs}};
    return j.dump() + "\n";
}

MethodRun parse_method_run(const std::string& text) {
    MethodRun run;
    try {
        const json j = json::parse(text);
        const int version = j.at("format_version").get<int>();
        if (version != kAttackVersion) {
            throw FormatError("attack file format_version " + std::to_string(version) + ", expected " +
                              std::to_string(kAttackVersion));
        }
        run.method = parse_method(j.at("method").get<std::string>());
        run.max_pgd_norm = j.at("max_pgd_norm").get<double>();
        run.pgd_calls = j.at("pgd_calls").get<std::size_t>();
        for (const auto& e : j.at("jobs")) {
            ConversionJob job;
            job.source_index = e.at("source_index").get<std::size_t>();
            job.source_speaker = e.at("source_speaker").get<std::size_t>();
            job.target = e.at("target").get<std::size_t>();
            const auto shape = e.at("shape").get<Shape>();
            Generation g;
            g.prediction = e.at("prediction").get<std::size_t>();
            g.frames = Tensor(shape, e.at("frames").get<std::vector<double>>());
            g.perturbation = Tensor(shape, e.at("perturbation").get<std::vector<double>>());
            run.jobs.push_back(job);
            run.outputs.push_back(std::move(g));
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("attack file: ") + e.what());
    } catch (const ShapeError& e) {
        throw FormatError(std::string("attack file: ") + e.what());
    }
    return run;
}

namespace {

std::vector<fs::path> attack_outputs(const RunConfig& cfg) {
    std::vector<fs::path> out;
    for (auto m : kAllMethods) out.push_back(attack_path(cfg, m));
    return out;
}

}  // namespace

void cmd_attack(const RunConfig& cfg, const StageOptions& opt) {
    Stage s{"attack", config_hash(cfg, "attack"),
            {dataset_path(cfg), encoder_path(cfg), classifier_path(cfg), decoder_path(cfg, VariantKind::vanilla),
             decoder_path(cfg, VariantKind::spk_constraint), decoder_path(cfg, VariantKind::adv_constraint)},
            attack_outputs(cfg)};
    const Dataset ds = load_run_dataset(cfg);
    const auto fp = ds.world.fingerprint();
    require_upstream(cfg, encoder_path(cfg), "encoder", fp);
    require_upstream(cfg, classifier_path(cfg), "classifier", fp);
    for (auto v : {VariantKind::vanilla, VariantKind::spk_constraint, VariantKind::adv_constraint}) {
        require_upstream(cfg, decoder_path(cfg, v), decoder_stage(v), fp);
    }
    if (up_to_date(s)) return log_skip(opt, s.name);

    const auto encoder = encoder_from_checkpoint(load_checkpoint(encoder_path(cfg), "encoder"));
    const MlpSpeakerClassifier victim(classifier_from_checkpoint(load_checkpoint(classifier_path(cfg), "classifier")));
    std::vector<DecoderParams> decoders;
    for (auto v : {VariantKind::vanilla, VariantKind::spk_constraint, VariantKind::adv_constraint}) {
        decoders.push_back(decoder_from_checkpoint(load_checkpoint(decoder_path(cfg, v), "decoder")));
    }
    const TrainedModels models{&encoder, &victim, &decoders[0], &decoders[1], &decoders[2]};
    BenchSettings settings;
    settings.reverse = cfg.reverse;
    settings.schedule = cfg.schedule;
    settings.pgd = cfg.pgd;
    settings.threads = opt.threads;
    const auto jobs = make_protocol(ds.test, ds.world.n_speakers(), cfg.eval.targets_per_source);
    const auto seed = stage_seed(cfg, "attack");

    Timer timer;
    std::vector<MethodRun> runs;
    runs.push_back(run_method(MethodId::vanilla, models, ds.test, jobs, settings, seed));
    for (auto m : kAllMethods) {
        if (m == MethodId::vanilla) continue;
        runs.push_back(run_method(m, models, ds.test, jobs, settings, seed, &runs.front().outputs));
    }
    for (const auto& run : runs) {
        const auto path = attack_path(cfg, run.method);
        write_text(path, serialize_method_run(run, cfg.seed));
        write_manifest(s, path, cfg, fp, {{"max_pgd_norm", run.max_pgd_norm}, {"pgd_calls", run.pgd_calls}});
    }
    if (opt.log) *opt.log << "attack: ";
    logf(opt, "%.0f conversions x 4 methods (%.1fs)", static_cast<double>(jobs.size()), timer.seconds());
}

void cmd_eval(const RunConfig& cfg, const StageOptions& opt) {
    Stage s{"eval", config_hash(cfg, "eval"), attack_outputs(cfg), {report_csv_path(cfg)}};
    s.inputs.insert(s.inputs.begin(), dataset_path(cfg));
    const Dataset ds = load_run_dataset(cfg);
    const auto fp = ds.world.fingerprint();
    for (auto m : kAllMethods) require_upstream(cfg, attack_path(cfg, m), "attack", fp);
    if (up_to_date(s)) return log_skip(opt, s.name);

    std::vector<MethodSummary> rows;
    for (auto m : kAllMethods) {
        const MethodRun run = parse_method_run(read_text(attack_path(cfg, m)));
        rows.push_back(summarize(run, ds, cfg.seed));
    }
    const auto report = build_report(std::move(rows), {{"world_fingerprint", fp}});
    write_text(report_csv_path(cfg), report_csv(report));
    write_manifest(s, report_csv_path(cfg), cfg, fp);
    if (opt.log) {
        for (const auto& r : report.rows) {
            *opt.log << "eval: " << method_name(r.method) << ' ';
            logf(opt, "acc %.4f frechet_to_target %.4f", r.acc, r.frechet_to_target);
        }
    }
}

std::string cmd_report(const RunConfig& cfg, const StageOptions& opt) {
    require_upstream(cfg, report_csv_path(cfg), "eval", "");
    const auto report = parse_report_csv(read_text(report_csv_path(cfg)));
    const auto md = report_markdown(report);
    write_text(cfg.out_dir / "report.md", md);
    if (opt.log) *opt.log << "report: wrote " << (cfg.out_dir / "report.md").string() << '\n';
    return md;
}

namespace {

template <class Fn>
void run_stage(const std::string& name, Fn&& fn) {
    try {
        fn();
    } catch (const ConfigError& e) {
        throw ConfigError("stage " + name + ": " + e.what());
    } catch (const ManifestError& e) {
        throw ManifestError("stage " + name + ": " + e.what());
    } catch (const FormatError& e) {
        throw FormatError("stage " + name + ": " + e.what());
    } catch (const DivergenceError& e) {
        throw DivergenceError("stage " + name + ": " + e.what(), e.step());
    } catch (const ContractError& e) {
        throw ContractError("stage " + name + ": " + e.what());
    }
}

}  // namespace

void cmd_all(const RunConfig& cfg, const StageOptions& opt) {
    run_stage("world", [&] { cmd_world(cfg, opt); });
    run_stage("encoder", [&] { cmd_train_encoder(cfg, opt); });
    run_stage("classifier", [&] { cmd_train_classifier(cfg, opt); });
    for (const auto& name : cfg.variants) {
        const auto v = parse_variant(name);
        run_stage(decoder_stage(v), [&] { cmd_train_decoder(cfg, v, opt); });
    }
    run_stage("attack", [&] { cmd_attack(cfg, opt); });
    run_stage("eval", [&] { cmd_eval(cfg, opt); });
    run_stage("report", [&] { cmd_report(cfg, opt); });
}

}  // namespace diffattack
