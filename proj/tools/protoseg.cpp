// protoseg: preprocess | train | infer | ttt | eval | synth

#include <iostream>

#include "CLI11.hpp"
#include "protoseg/cli.hpp"

using namespace protoseg;

int main(int argc, char** argv)
{
    CLI::App app{"Few-shot prototype segmentation pipeline"};
    app.set_version_flag("--version", cli::version_stamp());
    app.require_subcommand(1);

    std::string config_path, fold, variant, out;
    std::optional<std::uint64_t> seed;
    std::optional<int> episodes;
    bool force = false;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON run config")->check(CLI::ExistingFile);
        sub->add_option("--seed", seed, "root seed (overrides the config)");
        sub->add_option("--fold", fold, "only this fold (fold0, fold1, ...)");
        sub->add_option("--variant", variant, "base, cca, ttt or slice_adapter")
            ->check(CLI::IsMember({"base", "cca", "ttt", "slice_adapter"}));
        sub->add_option("--out", out, "output root (overrides the config)");
        sub->add_flag("--force", force, "overwrite outputs made with a different config");
    };
    auto* preprocess = app.add_subcommand("preprocess", "build the superpixel cache");
    auto* train = app.add_subcommand("train", "self-supervised episodic training per fold");
    auto* infer = app.add_subcommand("infer", "segment the test classes with the C-section protocol");
    auto* ttt = app.add_subcommand("ttt", "test-time training on saved predictions, then re-segment");
    auto* evaluate = app.add_subcommand("eval", "Dice tables from saved predictions");
    auto* synth = app.add_subcommand("synth", "write the synthetic dataset");
    for (auto* s : {preprocess, train, infer, ttt, evaluate, synth}) common(s);
    train->add_option("--episodes", episodes, "override train.episodes")->check(CLI::PositiveNumber);

    CLI11_PARSE(app, argc, argv);

    try {
        cli::RunConfig cfg = config_path.empty() ? cli::RunConfig{} : cli::load_run_config(config_path);
        if (seed) cfg.seed = *seed;
        if (!out.empty()) cfg.out = out;
        if (config_path.empty() && cfg.dataset.manifest.empty()) {
            // Without a config the only dataset we can know about is the synthetic one.
            cfg = cli::run_config_from_json({{"dataset", {{"synthetic", true}}}});
            if (seed) cfg.seed = *seed;
            if (!out.empty()) cfg.out = out;
        }
        if (episodes) cfg.train.episodes = *episodes;
        cfg.resolve();
        cfg.validate();

        cli::CommandOptions opt;
        opt.fold = fold;
        if (!variant.empty()) opt.variant = eval::parse_variant(variant);
        opt.force = force;
        opt.log = &std::cout;
        std::cout << "protoseg " << cli::version_stamp() << "  config digest " << cfg.digest() << '\n';

        if (*synth) cli::cmd_synth(cfg, opt);
        else if (*preprocess) cli::cmd_preprocess(cfg, opt);
        else if (*train) cli::cmd_train(cfg, opt);
        else if (*infer) cli::cmd_infer(cfg, opt);
        else if (*ttt) cli::cmd_ttt(cfg, opt);
        else if (*evaluate) cli::cmd_eval(cfg, opt);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
