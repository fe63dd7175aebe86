#include "cli/commands.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

struct ConfigArgs {
    std::string config;
    dsh::Overrides overrides;
    bool full_channel = false;
    bool sharing = false;
};

void add_config_flags(CLI::App* cmd, ConfigArgs& a, bool training) {
    cmd->add_option("--config", a.config, "Config file of section.key = value lines");
    cmd->add_option("--data-root", a.overrides.data_root, "Dataset directory (default: $DYNSHUFFLE_DATA)");
    cmd->add_option("--seed", a.overrides.seed, "Seed for model init and data order");
    if (!training) return;
    cmd->add_option("--epochs", a.overrides.epochs, "Training epochs");
    cmd->add_option("--lambda", a.overrides.lambda, "Regularizer weight");
    cmd->add_option("--lr", a.overrides.lr, "Initial learning rate");
    cmd->add_flag("--no-binarize", a.overrides.no_binarize, "Train shuffles on the soft matrices");
    cmd->add_flag("--no-orth-reg", a.overrides.no_orth_reg, "Drop the regularizer from the loss");
    cmd->add_flag("--no-dynamic-input", a.overrides.no_dynamic_input, "Learn one fixed matrix per layer");
    auto* full = cmd->add_flag("--full-channel", a.full_channel, "Generate full-width matrices (no group sharing)");
    auto* share = cmd->add_flag("--sharing", a.sharing, "Share one generated matrix across groups");
    full->excludes(share);
}

dsh::RunConfig resolve(ConfigArgs& a) {
    dsh::RunConfig cfg = a.config.empty() ? dsh::RunConfig{} : dsh::RunConfig::load(a.config);
    if (a.full_channel) a.overrides.sharing = false;
    if (a.sharing) a.overrides.sharing = true;
    dsh::apply_overrides(cfg, a.overrides);
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dynamic channel shuffle: training, evaluation and verification"};
    app.require_subcommand(1);

    ConfigArgs train_args;
    std::string train_out;
    auto* train = app.add_subcommand("train", "Train a model and write metrics and checkpoints");
    add_config_flags(train, train_args, true);
    train->add_option("--out", train_out, "Output directory")->required();

    ConfigArgs eval_args;
    std::string eval_ckpt, eval_out;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
    add_config_flags(eval, eval_args, false);
    eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
    eval->add_option("--out", eval_out, "Also write eval.csv here");

    dsh::GradCheckOptions gc;
    auto* grad = app.add_subcommand("gradcheck", "Check every backward rule against finite differences");
    grad->add_option("--seed", gc.seed, "Seed for the random test inputs");
    grad->add_option("--inject-fault", gc.inject_fault)->group("");

    ConfigArgs exp_args;
    std::string exp_ckpt, exp_out;
    std::size_t exp_samples = 4;
    auto* exp = app.add_subcommand("export-matrices", "Write per-sample shuffle matrices as PGM and CSV");
    add_config_flags(exp, exp_args, false);
    exp->add_option("--checkpoint", exp_ckpt, "Checkpoint file (default: fresh initialization)");
    exp->add_option("--samples", exp_samples, "Test images to export")->capture_default_str();
    exp->add_option("--out", exp_out, "Output directory")->required();

    std::size_t reps = 15, spatial = 32;
    auto* bench = app.add_subcommand("bench-shuffle", "Time dense-matrix against index-gather shuffles");
    bench->add_option("--reps", reps, "Repetitions per shape")->capture_default_str();
    bench->add_option("--spatial", spatial, "Feature map height and width")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : dsh::kExitConfig;
    }

    return dsh::run_guarded(
        [&]() -> int {
            if (*train) return dsh::cmd_train(resolve(train_args), train_out, std::cout);
            if (*eval) return dsh::cmd_eval(resolve(eval_args), !eval_args.config.empty(), eval_ckpt, eval_out, std::cout);
            if (*grad) return dsh::cmd_gradcheck(gc, std::cout);
            if (*exp) return dsh::cmd_export_matrices(resolve(exp_args), exp_ckpt, exp_samples, exp_out, std::cout);
            return dsh::cmd_bench_shuffle(reps, spatial, std::cout);
        },
        std::cerr);
}
