#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "echotune/rng.hpp"
#include "echotune/tensor.hpp"
#include "echotune/types.hpp"

namespace echotune {

struct LayerTrace; // backbone.hpp

namespace echo {

// Where the echo signal comes from and where it is injected. Source layers
// may be negative (counted from the end); after resolution the smallest
// source must sit strictly deeper than the largest target.
struct EchoConfig {
    bool enabled = true;
    std::vector<int> source_layers{-4, -3};
    std::vector<int> target_layers{2, 3};
    std::vector<Proj> target_projections{Proj::q, Proj::v};
    int bottleneck_dim = 16;
    double gate_bias_init = -2.0;
    double lambda_init = 1.0;
    bool answer_only_mask = true;

    // Throws ConfigError on empty lists, out-of-range layers, or a source
    // band that is not strictly deeper than the target band.
    void validate(int n_layers) const;
    std::vector<int> resolved_source_layers(int n_layers) const;
};

// Projection + gate parameters for one (target layer, projection) module.
// W2/U2 start at zero so the injected vector is exactly null at step 0;
// the gate bias starts negative so the gate opens slowly.
struct EchoModuleParams {
    Tensor w1;     // [bottleneck x d_model]
    Tensor w2;     // [d_out x bottleneck]
    Tensor u1;     // [bottleneck x d_model]
    Tensor u2;     // [d_out x bottleneck]
    Tensor bias;   // [d_out]
    Tensor lambda; // [1]
};

using EchoModuleMap = std::map<ModuleKey, EchoModuleParams>;

// Per-sample state consumed by the injected forward pass. z_bar is already
// RMS-normalized and detached; mask has one entry per position.
struct InjectionContext {
    Tensor z_bar;
    std::vector<uint8_t> mask;
    int route = 0;
};

// t* per row: index of the last position before the supervised answer run.
// Requires at least one supervised label per row, not at position 0, and a
// contiguous supervised block; throws DataError otherwise.
std::vector<int> find_boundary(std::span<const int> labels, int rows, int cols);
int find_boundary_row(std::span<const int> labels);

// M = 1 exactly where the label is supervised.
std::vector<uint8_t> build_answer_mask(std::span<const int> labels);

// Mean of source-layer hidden states at the boundary position, detached.
// Returns a 1-D [d_model] tensor.
Tensor extract_echo(const LayerTrace& trace, std::span<const int> source_layers, int t_star);

// RMS-normalizes a raw echo vector (Eq. 3's Norm); shape-preserving.
Tensor normalize_echo(const Tensor& z);

// Full injection chain from a raw echo vector: normalize, project, gate,
// scale. Returns the per-sample injection vector delta [d_out].
Tensor compute_injection(const Tensor& z, const EchoModuleParams& p);

// Same chain starting from an already-normalized z_bar (what the forward
// pass uses, since Norm(z) is shared across all target modules).
Tensor injection_from_normalized(const Tensor& z_bar, const EchoModuleParams& p);

// Gate activations sigma(U2 tanh(U1 z_bar) + b) for one module, [d_out].
Tensor compute_gate(const Tensor& z_bar, const EchoModuleParams& p);

// o[t] + route * mask[t] * delta, rows with mask 0 copied bitwise.
Tensor inject(const Tensor& o, const Tensor& delta, std::span<const uint8_t> mask, int route);

// Batched form over concatenated samples: rows [row_starts[b], row_starts[b+1])
// receive deltas[b] at masked positions.
Tensor inject_batch(const Tensor& o, const std::vector<Tensor>& deltas,
                    std::span<const uint8_t> mask, const std::vector<int>& row_starts, int route);

// Fresh module parameters: W1/U1 Kaiming-uniform, W2/U2 zeros, bias filled
// with gate_bias_init, lambda = lambda_init.
EchoModuleParams init_echo_module(const EchoConfig& cfg, int d_model, int d_out, DetRng& rng);
EchoModuleMap init_echo_modules(const EchoConfig& cfg, int n_layers, int d_model, int d_out,
                                DetRng& rng);

int64_t echo_module_param_count(int d_model, int d_out, int bottleneck);

// Call counters used to assert that evaluation never touches the echo path.
struct Counters {
    uint64_t extract_calls = 0;
    uint64_t inject_calls = 0;
};
Counters& counters();
void reset_counters();

} // namespace echo
} // namespace echotune
