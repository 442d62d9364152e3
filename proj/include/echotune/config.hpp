#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "echotune/backbone.hpp"
#include "echotune/data.hpp"
#include "echotune/echo.hpp"
#include "echotune/objective.hpp"
#include "echotune/types.hpp"

namespace echotune {

// Full run configuration. Parsed from a flat "key = value" text file; every
// key has a default, unknown keys are rejected with their line number.
struct RunConfig {
    BackboneConfig backbone;

    AdapterKind adapter_kind = AdapterKind::lora;
    std::vector<Proj> adapter_targets{Proj::q, Proj::k, Proj::v, Proj::o};
    int adapter_rank = 16;
    double adapter_alpha = 32.0;
    double adapter_dropout = 0.05;

    echo::EchoConfig echo;

    double p_start = 1.0;
    double p_end = 0.2;

    ObjectiveConfig objective;

    DataSpec data;
    std::string data_file;     // when set, training samples are loaded, not generated
    bool dump_datasets = false;

    int epochs = 3;
    int batch_size = 16;

    uint64_t seed_init = 0;
    uint64_t seed_data = 1;
    uint64_t seed_routing = 2;
    uint64_t seed_dropout = 3;

    std::string out_dir = "runs/default";

    void validate() const;

    // Canonical serialization: every key in fixed order; reparsing it
    // reproduces the config exactly.
    std::string canonical_text() const;
    uint64_t config_hash() const;

    // Overrides the four seed streams from one base value.
    void apply_seed(uint64_t seed);

    static RunConfig from_string(const std::string& text, const std::string& origin = "<string>");
    static RunConfig from_file(const std::filesystem::path& path);
};

} // namespace echotune
