#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "bda/error.hpp"
#include "bda/runs.hpp"

namespace {

enum Exit { kOk = 0, kConfig = 2, kData = 3, kRuntime = 4 };

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> synthetic;
    std::optional<std::size_t> epochs;
    std::optional<double> labeled_fraction;
    bool random_init = false;
    bool disable_reconstruction = false;
    bool disable_centering = false;
    bool freeze_encoder = false;
    std::string out;
    std::string data;
    bool print_config = false;

    std::string checkpoint;
    std::string resume;
    std::int64_t stop_at = -1;
    bool oracle = false;
    std::string pair;
};

void add_common(CLI::App* cmd, Flags& f) {
    cmd->add_option("--config", f.config, "JSON run configuration");
    cmd->add_option("--seed", f.seed, "global seed");
    cmd->add_option("--synthetic", f.synthetic, "generate N synthetic pairs instead of reading --data");
    cmd->add_option("--data", f.data, "dataset root in xBD layout");
    cmd->add_option("--out", f.out, "output directory");
    cmd->add_flag("--print-config", f.print_config, "print the resolved configuration and exit");
}

bda::cli::RunConfig resolve(const Flags& f, const std::string& command) {
    bda::cli::RunConfig c = f.config.empty() ? bda::cli::RunConfig{} : bda::cli::load_config(f.config);
    if (f.seed) c.run.seed = *f.seed;
    if (f.synthetic) c.data.synthetic_count = *f.synthetic;
    if (!f.data.empty()) c.data.root = f.data;
    if (!f.out.empty()) c.run.out_dir = f.out;
    if (f.epochs) (command == "pretrain" ? c.pretrain.epochs : c.finetune.epochs) = *f.epochs;
    if (f.labeled_fraction) c.finetune.labeled_fraction = *f.labeled_fraction;
    if (f.random_init) c.finetune.random_init = true;
    if (f.disable_reconstruction) c.pretrain.disable_reconstruction = true;
    if (f.disable_centering) c.pretrain.disable_centering = true;
    if (f.freeze_encoder) c.finetune.freeze_encoder = true;
    return c;
}

int run(const std::string& command, const Flags& f) {
    using namespace bda::cli;
    RunConfig config = resolve(f, command);
    config.validate();
    if (f.print_config) {
        std::cout << config_to_json(config).dump(2) << '\n';
        return kOk;
    }
    if (command == "pretrain") {
        PretrainOptions o;
        o.resume = f.resume;
        o.stop_at_step = f.stop_at;
        o.progress = &std::cerr;
        auto r = run_pretrain(config, o);
        std::cout << r.checkpoint_path.string() << '\n';
    } else if (command == "finetune") {
        FinetuneOptions o;
        o.init_checkpoint = f.checkpoint;
        o.progress = &std::cerr;
        auto r = run_finetune(config, o);
        std::cout << r.checkpoint_path.string() << '\n';
    } else if (command == "evaluate") {
        EvaluateOptions o;
        o.checkpoint = f.checkpoint;
        o.oracle = f.oracle;
        std::cout << bda::metrics::to_json(run_evaluate(config, o)) << '\n';
    } else if (command == "visualize") {
        VisualizeOptions o;
        o.checkpoint = f.checkpoint;
        o.pair_id = f.pair;
        auto r = run_visualize(config, o);
        std::cout << r.panel.string() << '\n' << r.heatmap.string() << '\n';
    } else if (command == "gen-data") {
        std::cout << run_gen_data(config) << " pairs written to " << config.run.out_dir << '\n';
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Self-supervised pre-training and siamese fine-tuning for building damage assessment"};
    app.require_subcommand(1);
    Flags f;

    auto* pre = app.add_subcommand("pretrain", "stage-1 self-supervised pre-training");
    add_common(pre, f);
    pre->add_option("--epochs", f.epochs, "pre-training epochs");
    pre->add_flag("--disable-reconstruction", f.disable_reconstruction, "drop the reconstruction branch");
    pre->add_flag("--disable-centering", f.disable_centering, "keep the teacher center at zero");
    pre->add_option("--resume", f.resume, "continue from a pre-training checkpoint");
    pre->add_option("--stop-at", f.stop_at, "stop after this many total steps");

    auto* fine = app.add_subcommand("finetune", "stage-2 siamese fine-tuning on labeled pairs");
    add_common(fine, f);
    fine->add_option("--epochs", f.epochs, "fine-tuning epochs");
    fine->add_option("--labeled-fraction", f.labeled_fraction, "fraction of training labels to keep");
    fine->add_option("--checkpoint", f.checkpoint, "pre-training checkpoint to start from");
    fine->add_flag("--random-init", f.random_init, "start from a randomly initialised encoder");
    fine->add_flag("--freeze-encoder", f.freeze_encoder, "train the head only");

    auto* eval = app.add_subcommand("evaluate", "F1 report on the held-out pairs");
    add_common(eval, f);
    eval->add_option("--checkpoint", f.checkpoint, "fine-tuned checkpoint");
    eval->add_flag("--oracle", f.oracle, "score the ground truth against itself");

    auto* vis = app.add_subcommand("visualize", "attention heatmap panel for one pair");
    add_common(vis, f);
    vis->add_option("--checkpoint", f.checkpoint, "checkpoint holding encoder weights")->required();
    vis->add_option("--pair", f.pair, "pair id (default: first pair)");

    auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset in xBD layout");
    add_common(gen, f);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        return run(command, f);
    } catch (const bda::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const bda::VersionError& e) {
        std::cerr << "checkpoint error: " << e.what() << '\n';
        return kData;
    } catch (const bda::IntegrityError& e) {
        std::cerr << "checkpoint error: " << e.what() << '\n';
        return kData;
    } catch (const bda::DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kRuntime;
    }
}
