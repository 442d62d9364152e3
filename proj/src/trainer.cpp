#include "echotune/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "echotune/error.hpp"

namespace echotune {

Model build_model_from_config(const RunConfig& cfg, std::vector<std::string>* warnings) {
    cfg.validate();
    return build_model(cfg.backbone, cfg.adapter_kind, cfg.adapter_targets, cfg.adapter_rank,
                       cfg.adapter_alpha, cfg.adapter_dropout, cfg.echo, cfg.seed_init, warnings);
}

int total_training_steps(const RunConfig& cfg, int n_train_samples) {
    const int per_epoch = (n_train_samples + cfg.batch_size - 1) / cfg.batch_size;
    return per_epoch * cfg.epochs;
}

std::map<std::string, double> evaluate_model(const RunConfig& cfg, Model& model) {
    std::map<std::string, double> acc;
    const uint64_t eval_seed = derive_seed(cfg.seed_data, "eval");
    for (TaskKind task : cfg.data.tasks) {
        std::vector<Sample> samples =
            gen_dataset(task, cfg.data.eval_per_task, cfg.data, eval_seed, cfg.backbone.vocab_size);
        EvalResult r = eval_accuracy(model.backbone, model.adapters, samples);
        acc[task_name(task)] = r.accuracy();
    }
    return acc;
}

TrainArtifacts run_training(const RunConfig& cfg, std::ostream* log) {
    const auto t0 = std::chrono::steady_clock::now();
    cfg.validate();

    std::vector<std::string> warnings;
    Model model = build_model_from_config(cfg, &warnings);
    if (log) {
        for (const auto& w : warnings) *log << "warning: " << w << "\n";
    }

    std::vector<Sample> train_samples;
    if (!cfg.data_file.empty()) {
        train_samples = load_dataset(cfg.data_file);
    } else {
        train_samples =
            gen_mixture(cfg.data, cfg.data.train_per_task, cfg.seed_data, cfg.backbone.vocab_size);
    }
    std::vector<EncodedRow> rows;
    rows.reserve(train_samples.size());
    for (const auto& s : train_samples) {
        rows.push_back(encode(s, cfg.backbone.max_seq_len, cfg.backbone.vocab_size));
    }

    std::filesystem::create_directories(cfg.out_dir);
    const std::filesystem::path out(cfg.out_dir);
    if (cfg.dump_datasets) dump_dataset(train_samples, out / "train_dataset.txt");

    const int n = static_cast<int>(rows.size());
    const int total_steps = total_training_steps(cfg, n);

    RoutingSchedule schedule{cfg.p_start, cfg.p_end, total_steps, cfg.seed_routing};
    RouteSampler router(schedule);

    AdamW optimizer(
        [&] {
            std::vector<Tensor> ps;
            for (auto& [name, t] : model.trainable_parameters()) ps.push_back(t);
            return ps;
        }(),
        cfg.objective);

    DetRng dropout_rng(cfg.seed_dropout);
    DetRng shuffle_rng(derive_seed(cfg.seed_data, "shuffle"));
    MetricsWriter metrics(out / "metrics.csv");

    const uint64_t hash = cfg.config_hash();
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

    StepResult last;
    int k = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // Fisher-Yates over the deterministic shuffle stream.
        for (int i = n - 1; i > 0; --i) {
            const int j = shuffle_rng.uniform_int(0, i + 1);
            std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
        }
        for (int start = 0; start < n; start += cfg.batch_size) {
            const int stop = std::min(n, start + cfg.batch_size);
            std::vector<EncodedRow> chunk;
            chunk.reserve(static_cast<size_t>(stop - start));
            for (int i = start; i < stop; ++i) chunk.push_back(rows[static_cast<size_t>(order[static_cast<size_t>(i)])]);
            Batch batch = make_batch(chunk, cfg.backbone.vocab_size);

            last = training_step(model, batch, k, model.echo.enabled ? &router : nullptr, optimizer,
                                 cfg.objective, &dropout_rng);
            metrics.add(k, last);
            if (log && (k % 50 == 0 || k + 1 == total_steps)) {
                *log << "step " << k << "/" << total_steps << " L_off=" << last.loss_off
                     << " L_total=" << last.loss_total << "\n";
            }
            ++k;
        }
        Checkpoint epoch_ckpt = checkpoint_from_model(model, hash);
        save_checkpoint(epoch_ckpt, out / ("ckpt_epoch" + std::to_string(epoch) + ".bin"));
    }
    metrics.flush();

    Checkpoint final_ckpt = checkpoint_from_model(model, hash);
    const std::filesystem::path ckpt_path = out / "model.ckpt";
    save_checkpoint(final_ckpt, ckpt_path);

    TrainArtifacts art;
    art.checkpoint_path = ckpt_path;
    art.metrics_csv = metrics.path();
    art.summary_json = out / "summary.json";
    art.eval_accuracy = evaluate_model(cfg, model);
    double acc_sum = 0.0;
    for (const auto& [task, acc] : art.eval_accuracy) acc_sum += acc;
    art.mean_eval_accuracy = art.eval_accuracy.empty() ? 0.0 : acc_sum / art.eval_accuracy.size();
    art.last_step = last;
    art.total_steps = total_steps;
    art.config_hash = hash;
    art.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    RunSummary summary;
    summary.last_step = last;
    summary.total_steps = total_steps;
    summary.wall_seconds = art.wall_seconds;
    summary.eval_accuracy = art.eval_accuracy;
    write_summary_json(art.summary_json, cfg, summary);

    if (log) {
        *log << "trained " << total_steps << " steps in " << art.wall_seconds << "s; eval:";
        for (const auto& [task, acc] : art.eval_accuracy) *log << " " << task << "=" << acc;
        *log << "\n";
    }
    return art;
}

MergeCheckResult merge_check(Model& model, int n_inputs, uint64_t seed) {
    MergeCheckResult result;
    DetRng rng(seed);
    for (const auto& [key, ap] : model.adapters.modules) {
        const LayerWeights& lw = model.backbone.layers[static_cast<size_t>(key.first)];
        const Tensor& w = [&]() -> const Tensor& {
            switch (key.second) {
            case Proj::q: return lw.wq;
            case Proj::k: return lw.wk;
            case Proj::v: return lw.wv;
            case Proj::o: return lw.wo;
            }
            throw UsageError("bad projection enum");
        }();
        Tensor merged = merge_adapter(w, ap);
        const int d_in = w.dim(1);
        double worst = 0.0;
        for (int i = 0; i < n_inputs; ++i) {
            std::vector<double> uv(static_cast<size_t>(d_in));
            for (auto& e : uv) e = rng.gaussian();
            Tensor u = Tensor::from_values({1, d_in}, std::move(uv));
            Tensor adapted = adapted_forward(w, ap, u, false, nullptr);
            Tensor direct = matmul(u, merged, false, true);
            for (int j = 0; j < adapted.numel(); ++j) {
                worst = std::max(worst, std::abs(adapted.values()[static_cast<size_t>(j)] -
                                                 direct.values()[static_cast<size_t>(j)]));
            }
        }
        result.per_module[std::to_string(key.first) + "." + proj_name(key.second)] = worst;
        result.max_abs_deviation = std::max(result.max_abs_deviation, worst);
    }
    return result;
}

} // namespace echotune
