#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "diffattack/errors.hpp"
#include "diffattack/pipeline.hpp"

using namespace diffattack;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kArtifact = 3, kDivergence = 4 };

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DiffAttack lab: diffusion voice conversion with adversarial constraints on a synthetic speaker world"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::size_t threads = 1;
    std::string out;
    bool quiet = false;
    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON run config")->required()->check(CLI::ExistingFile);
        sub->add_option("--seed", seed, "override the config seed");
        sub->add_option("--threads", threads, "worker threads for evaluation (results do not depend on it)")
            ->check(CLI::PositiveNumber);
        sub->add_option("--out", out, "output directory (overrides out_dir)");
        sub->add_flag("-q,--quiet", quiet, "no progress lines");
    };

    auto* world = app.add_subcommand("world", "generate the speaker world and dataset");
    auto* enc = app.add_subcommand("train-encoder", "train the content encoder");
    auto* cls = app.add_subcommand("train-classifier", "train the victim speaker classifier");
    auto* dec = app.add_subcommand("train-decoder", "train one decoder variant");
    std::string variant = "vanilla";
    dec->add_option("--variant", variant, "vanilla | spk | adv")
        ->check(CLI::IsMember({"vanilla", "spk", "adv"}));
    auto* attack = app.add_subcommand("attack", "convert the test set with every method");
    auto* eval = app.add_subcommand("eval", "score the conversions and write report.csv");
    auto* report = app.add_subcommand("report", "render report.csv as markdown");
    auto* all = app.add_subcommand("all", "run every stage in order");
    for (auto* sub : {world, enc, cls, dec, attack, eval, report, all}) common(sub);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    try {
        RunConfig cfg = load_run_config(config_path);
        if (seed) cfg.seed = *seed;
        if (!out.empty()) cfg.out_dir = out;
        StageOptions opt;
        opt.threads = threads;
        opt.log = quiet ? nullptr : &std::cerr;

        if (world->parsed()) cmd_world(cfg, opt);
        if (enc->parsed()) cmd_train_encoder(cfg, opt);
        if (cls->parsed()) cmd_train_classifier(cfg, opt);
        if (dec->parsed()) cmd_train_decoder(cfg, parse_variant(variant), opt);
        if (attack->parsed()) cmd_attack(cfg, opt);
        if (eval->parsed()) cmd_eval(cfg, opt);
        if (report->parsed()) std::cout << cmd_report(cfg, opt);
        if (all->parsed()) {
            cmd_all(cfg, opt);
            std::cout << read_text(cfg.out_dir / "report.md");
        }
        return kOk;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const ManifestError& e) {
        std::cerr << "artifact error: " << e.what() << '\n';
        return kArtifact;
    } catch (const FormatError& e) {
        std::cerr << "artifact error: " << e.what() << '\n';
        return kArtifact;
    } catch (const DivergenceError& e) {
        std::cerr << "numerical divergence: " << e.what() << '\n';
        return kDivergence;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kFailure;
    }
}
