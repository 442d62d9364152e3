#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "echotune/objective.hpp"

namespace echotune {

struct RunConfig;

// Streams one CSV row per training step. Columns:
//   step,p_k,r_k,L_off,L_on,L_kd,L_total,grad_norm,gate_mean
// L_on / L_kd cells stay empty on steps where the echo pass did not run.
class MetricsWriter {
public:
    explicit MetricsWriter(const std::filesystem::path& csv_path);

    void add(int step, const StepResult& r);
    void flush();
    int rows() const { return rows_; }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
    std::ofstream file_;
    int rows_ = 0;
};

struct RunSummary {
    StepResult last_step;
    int total_steps = 0;
    double wall_seconds = 0.0;
    std::map<std::string, double> eval_accuracy;
};

void write_summary_json(const std::filesystem::path& path, const RunConfig& cfg,
                        const RunSummary& summary);

std::string format_double(double v); // shortest round-trippable decimal

} // namespace echotune
