#pragma once

#include <filesystem>
#include <map>
#include <ostream>
#include <string>

#include "echotune/config.hpp"
#include "echotune/metrics.hpp"
#include "echotune/model.hpp"
#include "echotune/objective.hpp"

namespace echotune {

struct TrainArtifacts {
    std::filesystem::path checkpoint_path;
    std::filesystem::path metrics_csv;
    std::filesystem::path summary_json;
    std::map<std::string, double> eval_accuracy; // per task
    double mean_eval_accuracy = 0.0;
    StepResult last_step;
    int total_steps = 0;
    double wall_seconds = 0.0;
    uint64_t config_hash = 0;
};

Model build_model_from_config(const RunConfig& cfg, std::vector<std::string>* warnings = nullptr);

// Full run: init, train, per-epoch + final checkpoints, metrics, evaluation,
// summary JSON. `log` (when set) receives progress lines.
TrainArtifacts run_training(const RunConfig& cfg, std::ostream* log = nullptr);

// Greedy exact-match accuracy per task on freshly generated eval sets
// (independent stream from the training data).
std::map<std::string, double> evaluate_model(const RunConfig& cfg, Model& model);

// Total steps the run will take, known before training starts.
int total_training_steps(const RunConfig& cfg, int n_train_samples);

struct MergeCheckResult {
    double max_abs_deviation = 0.0;
    std::map<std::string, double> per_module;
};

// Max |merged forward - adapted forward| over random inputs, per adapter.
MergeCheckResult merge_check(Model& model, int n_inputs, uint64_t seed);

} // namespace echotune
