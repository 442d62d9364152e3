#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "echotune/ablation.hpp"
#include "echotune/checkpoint.hpp"
#include "echotune/config.hpp"
#include "echotune/error.hpp"
#include "echotune/trainer.hpp"

namespace {

using namespace echotune;

RunConfig load_config(const std::string& path, bool has_seed, uint64_t seed,
                      const std::string& out_dir) {
    RunConfig cfg = RunConfig::from_file(path);
    if (has_seed) cfg.apply_seed(seed);
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    return cfg;
}

void apply_variant(RunConfig& cfg, const std::string& variant_id) {
    for (const AblationVariant& v : ablation_grid()) {
        if (v.id == variant_id) {
            cfg.echo.enabled = true;
            v.apply(cfg);
            return;
        }
    }
    throw ConfigError("unknown ablation variant '" + variant_id + "' (expected A-0 .. A-9)");
}

int cmd_train(const std::string& config_path, bool has_seed, uint64_t seed,
              const std::string& out_dir, const std::string& variant) {
    RunConfig cfg = load_config(config_path, has_seed, seed, out_dir);
    if (!variant.empty()) apply_variant(cfg, variant);
    cfg.validate();
    TrainArtifacts art = run_training(cfg, &std::cout);
    std::cout << "checkpoint: " << art.checkpoint_path.string() << "\n";
    std::cout << "metrics:    " << art.metrics_csv.string() << "\n";
    std::cout << "summary:    " << art.summary_json.string() << "\n";
    return 0;
}

int cmd_eval(const std::string& config_path, const std::string& ckpt_path, bool has_seed,
             uint64_t seed) {
    RunConfig cfg = load_config(config_path, has_seed, seed, "");
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    bool has_echo_tensors = false;
    for (const auto& t : ckpt.tensors) {
        if (t.name.rfind("echo.", 0) == 0) {
            has_echo_tensors = true;
            break;
        }
    }
    if (cfg.echo.enabled && !has_echo_tensors) {
        std::cout << "note: checkpoint carries no echo tensors; evaluating the echo-off model\n";
        cfg.echo.enabled = false;
    }
    Model model = build_model_from_config(cfg);
    RestoreReport report = restore_model(model, ckpt, cfg.config_hash());
    for (const auto& w : report.warnings) std::cout << "warning: " << w << "\n";

    std::map<std::string, double> acc = evaluate_model(cfg, model);
    std::printf("%-10s %s\n", "task", "exact_match");
    double total = 0.0;
    for (const auto& [task, a] : acc) {
        std::printf("%-10s %.4f\n", task.c_str(), a);
        total += a;
    }
    if (!acc.empty()) std::printf("%-10s %.4f\n", "mean", total / acc.size());
    return 0;
}

int cmd_ablate(const std::string& config_path, bool has_seed, uint64_t seed,
               const std::string& out_dir) {
    RunConfig cfg = load_config(config_path, has_seed, seed, "");
    std::filesystem::path out = out_dir.empty() ? std::filesystem::path(cfg.out_dir) / "ablation"
                                                : std::filesystem::path(out_dir);
    std::vector<AblationRow> rows = run_ablation(cfg, out, &std::cout);

    std::printf("%-5s %-36s", "id", "setting");
    for (TaskKind t : cfg.data.tasks) std::printf(" %8s", task_name(t).c_str());
    std::printf(" %8s\n", "avg");
    for (const auto& row : rows) {
        std::printf("%-5s %-36s", row.id.c_str(), row.name.c_str());
        for (TaskKind t : cfg.data.tasks) {
            auto it = row.task_accuracy.find(task_name(t));
            std::printf(" %8.4f", it == row.task_accuracy.end() ? 0.0 : it->second);
        }
        std::printf(" %8.4f\n", row.average);
    }
    std::cout << "table: " << (out / "ablation.csv").string() << "\n";
    return 0;
}

int cmd_export(const std::string& ckpt_path, const std::string& out_dir, bool deploy) {
    Checkpoint full = load_checkpoint(ckpt_path);
    std::filesystem::path out = out_dir.empty() ? std::filesystem::path(".") : std::filesystem::path(out_dir);
    std::filesystem::create_directories(out);
    Checkpoint result = deploy ? strip_echo(full) : full;
    const std::filesystem::path target = out / (deploy ? "deploy.ckpt" : "export.ckpt");
    save_checkpoint(result, target);
    std::cout << "wrote " << target.string() << " (" << result.tensors.size() << " tensors, from "
              << full.tensors.size() << ")\n";
    return 0;
}

int cmd_merge_check(const std::string& config_path, const std::string& ckpt_path, bool has_seed,
                    uint64_t seed) {
    RunConfig cfg = load_config(config_path, has_seed, seed, "");
    Model model = build_model_from_config(cfg);
    if (!ckpt_path.empty()) {
        Checkpoint ckpt = load_checkpoint(ckpt_path);
        RestoreReport report = restore_model(model, ckpt, cfg.config_hash());
        for (const auto& w : report.warnings) std::cout << "warning: " << w << "\n";
    }
    constexpr double kTolerance = 1e-9;
    MergeCheckResult r = merge_check(model, 100, derive_seed(cfg.seed_init, "merge-check"));
    std::printf("%-12s %s\n", "module", "max_abs_dev");
    for (const auto& [name, dev] : r.per_module) std::printf("%-12s %.3e\n", name.c_str(), dev);
    std::printf("%-12s %.3e (tolerance %.1e)\n", "overall", r.max_abs_deviation, kTolerance);
    if (r.max_abs_deviation >= kTolerance) {
        std::cerr << "merge-check FAILED\n";
        return 1;
    }
    std::cout << "merge-check OK\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"toy trainer for echo-injected low-rank adapters"};
    app.require_subcommand(1);

    std::string config_path, out_dir, ckpt_path, variant;
    uint64_t seed = 0;
    bool deploy = false;

    auto* train = app.add_subcommand("train", "train adapters, optionally with the echo path");
    train->add_option("--config", config_path, "run configuration file")->required();
    auto* train_seed = train->add_option("--seed", seed, "override all seed streams");
    train->add_option("--out", out_dir, "output directory override");
    train->add_option("--variant", variant, "apply one ablation delta (A-0 .. A-9)");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the synthetic tasks");
    eval->add_option("--config", config_path, "run configuration file")->required();
    eval->add_option("--checkpoint", ckpt_path, "checkpoint to evaluate")->required();
    auto* eval_seed = eval->add_option("--seed", seed, "override all seed streams");

    auto* ablate = app.add_subcommand("ablate", "run the ten-variant ablation grid");
    ablate->add_option("--config", config_path, "base configuration file")->required();
    auto* ablate_seed = ablate->add_option("--seed", seed, "override all seed streams");
    ablate->add_option("--out", out_dir, "grid output directory");

    auto* exp = app.add_subcommand("export", "re-serialize a checkpoint, optionally echo-stripped");
    exp->add_option("--checkpoint", ckpt_path, "source checkpoint")->required();
    exp->add_option("--out", out_dir, "output directory");
    exp->add_flag("--deploy", deploy, "strip echo tensors for deployment");

    auto* merge = app.add_subcommand("merge-check", "compare merged vs adapted forwards");
    merge->add_option("--config", config_path, "run configuration file")->required();
    merge->add_option("--checkpoint", ckpt_path, "checkpoint to check (default: fresh init)");
    auto* merge_seed = merge->add_option("--seed", seed, "override all seed streams");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) {
            return cmd_train(config_path, !train_seed->empty(), seed, out_dir, variant);
        }
        if (eval->parsed()) return cmd_eval(config_path, ckpt_path, !eval_seed->empty(), seed);
        if (ablate->parsed()) return cmd_ablate(config_path, !ablate_seed->empty(), seed, out_dir);
        if (exp->parsed()) return cmd_export(ckpt_path, out_dir, deploy);
        if (merge->parsed()) {
            return cmd_merge_check(config_path, ckpt_path, !merge_seed->empty(), seed);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
