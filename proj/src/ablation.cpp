#include "echotune/ablation.hpp"

#include <algorithm>
#include <fstream>

#include "echotune/error.hpp"
#include "echotune/trainer.hpp"

namespace echotune {

const std::vector<AblationVariant>& ablation_grid() {
    static const std::vector<AblationVariant> grid = {
        {"A-0", "baseline-no-echo", [](RunConfig& c) { c.echo.enabled = false; }},
        {"A-1", "no-routing",
         [](RunConfig& c) {
             c.p_start = 1.0;
             c.p_end = 1.0;
         }},
        {"A-2", "deep-to-deep",
         [](RunConfig& c) {
             const int n = c.backbone.n_layers;
             c.echo.source_layers = {-2, -1};
             c.echo.target_layers = {n - 4, n - 3};
         }},
        {"A-3", "shallow-to-shallow",
         [](RunConfig& c) {
             // Source band placed immediately above the (shallow) targets.
             int max_target = -1;
             for (int l : c.echo.target_layers) {
                 max_target = std::max(max_target, resolve_layer_index(l, c.backbone.n_layers));
             }
             c.echo.source_layers = {max_target + 1, max_target + 2};
         }},
        {"A-4", "no-answer-mask", [](RunConfig& c) { c.echo.answer_only_mask = false; }},
        {"A-5", "v-proj-only", [](RunConfig& c) { c.echo.target_projections = {Proj::v}; }},
        {"A-6", "no-answer-mask-all-projections",
         [](RunConfig& c) {
             c.echo.answer_only_mask = false;
             c.echo.target_projections = {Proj::q, Proj::k, Proj::v, Proj::o};
         }},
        {"A-7", "q-proj-only", [](RunConfig& c) { c.echo.target_projections = {Proj::q}; }},
        {"A-8", "all-projections",
         [](RunConfig& c) { c.echo.target_projections = {Proj::q, Proj::k, Proj::v, Proj::o}; }},
        {"A-9", "full-default", [](RunConfig&) {}},
    };
    return grid;
}

std::vector<AblationRow> run_ablation(const RunConfig& base, const std::filesystem::path& out_dir,
                                      std::ostream* log) {
    std::filesystem::create_directories(out_dir);
    std::vector<AblationRow> rows;
    for (const AblationVariant& variant : ablation_grid()) {
        RunConfig cfg = base;
        cfg.echo.enabled = true; // every non-baseline delta applies on top of the default echo path
        variant.apply(cfg);
        cfg.out_dir = (out_dir / ("variant_" + variant.id)).string();
        cfg.validate();
        if (log) *log << "ablation " << variant.id << " (" << variant.name << ")\n";
        TrainArtifacts art = run_training(cfg, log);

        AblationRow row;
        row.id = variant.id;
        row.name = variant.name;
        row.task_accuracy = art.eval_accuracy;
        row.average = art.mean_eval_accuracy;
        rows.push_back(std::move(row));
    }
    std::vector<std::string> task_order;
    for (TaskKind t : base.data.tasks) task_order.push_back(task_name(t));
    write_ablation_csv(rows, task_order, out_dir / "ablation.csv");
    return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows,
                        const std::vector<std::string>& task_order,
                        const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
    f << "variant,setting";
    for (const auto& t : task_order) f << ',' << t;
    f << ",avg\n";
    for (const auto& row : rows) {
        f << row.id << ',' << row.name;
        for (const auto& t : task_order) {
            auto it = row.task_accuracy.find(t);
            f << ',' << (it == row.task_accuracy.end() ? 0.0 : it->second);
        }
        f << ',' << row.average << "\n";
    }
}

} // namespace echotune
