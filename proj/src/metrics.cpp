#include "echotune/metrics.hpp"

#include <cstdio>

#include <json.hpp>

#include "echotune/config.hpp"
#include "echotune/error.hpp"

namespace echotune {

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

MetricsWriter::MetricsWriter(const std::filesystem::path& csv_path) : path_(csv_path) {
    file_.open(csv_path, std::ios::trunc);
    if (!file_) throw IoError("cannot open metrics file '" + csv_path.string() + "' for writing");
    file_ << "step,p_k,r_k,L_off,L_on,L_kd,L_total,grad_norm,gate_mean\n";
}

void MetricsWriter::add(int step, const StepResult& r) {
    file_ << step << ',' << format_double(r.prob) << ',' << r.route << ',' << format_double(r.loss_off)
          << ',';
    if (r.route == 1) file_ << format_double(r.loss_on);
    file_ << ',';
    if (r.route == 1) file_ << format_double(r.loss_kd);
    file_ << ',' << format_double(r.loss_total) << ',' << format_double(r.grad_norm) << ',';
    if (r.has_gate) file_ << format_double(r.gate_mean);
    file_ << '\n';
    ++rows_;
}

void MetricsWriter::flush() { file_.flush(); }

void write_summary_json(const std::filesystem::path& path, const RunConfig& cfg,
                        const RunSummary& summary) {
    nlohmann::json j;
    j["final"]["L_off"] = summary.last_step.loss_off;
    j["final"]["L_total"] = summary.last_step.loss_total;
    if (summary.last_step.route == 1) {
        j["final"]["L_on"] = summary.last_step.loss_on;
        j["final"]["L_kd"] = summary.last_step.loss_kd;
    }
    j["final"]["grad_norm"] = summary.last_step.grad_norm;
    j["steps"] = summary.total_steps;
    j["wall_time_s"] = summary.wall_seconds;
    for (const auto& [task, acc] : summary.eval_accuracy) j["eval"][task] = acc;

    // Echo the full configuration, one entry per canonical key.
    nlohmann::json cfg_json = nlohmann::json::object();
    std::istringstream lines(cfg.canonical_text());
    std::string line;
    while (std::getline(lines, line)) {
        const size_t eq = line.find('=');
        if (eq == std::string::npos) continue;
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        while (!key.empty() && key.back() == ' ') key.pop_back();
        while (!value.empty() && value.front() == ' ') value.erase(value.begin());
        cfg_json[key] = value;
    }
    j["config"] = cfg_json;

    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open summary file '" + path.string() + "' for writing");
    f << j.dump(2) << "\n";
}

} // namespace echotune
