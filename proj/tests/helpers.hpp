#pragma once

#include "echotune/config.hpp"
#include "echotune/data.hpp"
#include "echotune/model.hpp"

namespace echotune::testing {

inline BackboneConfig micro_backbone(int seed = 0) {
    BackboneConfig c;
    c.n_layers = 4;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_ff = 16;
    c.vocab_size = 12;
    c.max_seq_len = 16;
    c.seed = seed;
    return c;
}

inline echo::EchoConfig micro_echo() {
    echo::EchoConfig e;
    e.source_layers = {-1}; // resolves to layer 3
    e.target_layers = {1};
    e.target_projections = {Proj::q, Proj::v};
    e.bottleneck_dim = 4;
    return e;
}

inline Model micro_model(uint64_t seed = 0, bool echo_enabled = true,
                         AdapterKind kind = AdapterKind::lora, double dropout = 0.0) {
    echo::EchoConfig e = micro_echo();
    e.enabled = echo_enabled;
    return build_model(micro_backbone(static_cast<int>(seed)), kind,
                       {Proj::q, Proj::k, Proj::v, Proj::o}, 2, 4.0, dropout, e, seed);
}

// Nudges every trainable away from its init (B and the echo output
// projections start at zero, which hides most gradient paths).
inline void randomize_trainables(Model& m, uint64_t seed, double scale = 0.1) {
    DetRng rng(seed);
    for (auto& [name, t] : m.trainable_parameters()) {
        for (auto& v : t.raw_values()) v += rng.uniform(-scale, scale);
    }
}

// A small batch in the micro model's vocabulary (payload ids < 10).
inline Batch micro_batch(int rows = 3, uint64_t seed = 42) {
    DataSpec spec;
    spec.payload_vocab = 6;
    spec.prompt_len = 3;
    spec.modsum_prompt_len = 2;
    std::vector<Sample> samples = gen_dataset(TaskKind::copy, rows, spec, seed, 12);
    std::vector<EncodedRow> enc;
    for (const auto& s : samples) enc.push_back(encode(s, 16, 12));
    return make_batch(enc, 12);
}

// Micro-scale run configuration for harness-level tests.
inline RunConfig micro_run_config() {
    RunConfig cfg;
    cfg.backbone = micro_backbone();
    cfg.adapter_rank = 2;
    cfg.adapter_alpha = 4.0;
    cfg.adapter_dropout = 0.0;
    cfg.echo = micro_echo();
    cfg.data.tasks = {TaskKind::copy, TaskKind::reverse};
    cfg.data.train_per_task = 16;
    cfg.data.eval_per_task = 4;
    cfg.data.payload_vocab = 6;
    cfg.data.prompt_len = 3;
    cfg.data.modsum_prompt_len = 2;
    cfg.epochs = 1;
    cfg.batch_size = 8;
    return cfg;
}

} // namespace echotune::testing
