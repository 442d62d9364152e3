#pragma once

#include <functional>
#include <string>
#include <vector>

#include "echotune/adapters.hpp"
#include "echotune/backbone.hpp"
#include "echotune/checkpoint.hpp"
#include "echotune/echo.hpp"

namespace echotune {

// Frozen backbone plus the trainable adapter/echo parameters attached to it.
struct Model {
    FrozenWeights backbone;
    AdapterSet adapters;
    echo::EchoConfig echo;

    // Deterministic (name, tensor) order: adapters sorted by (layer, proj),
    // then echo modules; this order defines optimizer slot assignment.
    std::vector<std::pair<std::string, Tensor>> trainable_parameters();
    int64_t trainable_count();

    void for_each_tensor(const std::function<void(const std::string&, Tensor&)>& fn);
};

struct ModelInitSeeds {
    uint64_t init = 0;
};

// Builds backbone + adapters (+ echo modules when enabled) from independent
// derived streams, so enabling echo never shifts adapter initialization.
Model build_model(const BackboneConfig& backbone_cfg, AdapterKind kind,
                  const std::vector<Proj>& adapter_targets, int rank, double alpha,
                  double dropout_p, const echo::EchoConfig& echo_cfg, uint64_t init_seed,
                  std::vector<std::string>* warnings = nullptr);

Checkpoint checkpoint_from_model(Model& model, uint64_t config_hash);

struct RestoreReport {
    bool hash_match = true;
    std::vector<std::string> warnings;
};

// Copies values by name into the model; missing or misshapen tensors raise
// CheckpointError; a config-hash mismatch is reported as a warning.
RestoreReport restore_model(Model& model, const Checkpoint& ckpt, uint64_t expected_hash);

} // namespace echotune
