#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "echotune/config.hpp"

namespace echotune {

// One grid entry: a config delta over the base run. A-0 is the echo-disabled
// baseline; A-9 is the unmodified default path.
struct AblationVariant {
    std::string id;          // "A-0" .. "A-9"
    std::string name;        // descriptive, delta-keyed
    std::function<void(RunConfig&)> apply;
};

const std::vector<AblationVariant>& ablation_grid();

struct AblationRow {
    std::string id;
    std::string name;
    std::map<std::string, double> task_accuracy;
    double average = 0.0;
};

// Runs every variant from identical init seeds (fresh model and optimizer
// per variant) and writes <out_dir>/ablation.csv with per-task and average
// columns.
std::vector<AblationRow> run_ablation(const RunConfig& base, const std::filesystem::path& out_dir,
                                      std::ostream* log = nullptr);

void write_ablation_csv(const std::vector<AblationRow>& rows,
                        const std::vector<std::string>& task_order,
                        const std::filesystem::path& path);

} // namespace echotune
