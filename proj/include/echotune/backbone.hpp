#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "echotune/adapters.hpp"
#include "echotune/echo.hpp"
#include "echotune/rng.hpp"
#include "echotune/tensor.hpp"

namespace echotune {

struct BackboneConfig {
    int n_layers = 12;
    int d_model = 64;
    int n_heads = 4;
    int d_ff = 192;
    int vocab_size = 64;
    int max_seq_len = 64;
    int seed = 0;

    int head_dim() const { return d_model / n_heads; }
    void validate() const; // ConfigError on violated invariants
};

// Pre-norm decoder block weights; everything here stays frozen.
struct LayerWeights {
    Tensor attn_norm; // [d_model]
    Tensor wq, wk, wv, wo; // [d_model x d_model]
    Tensor ffn_norm; // [d_model]
    Tensor w_gate, w_up; // [d_ff x d_model]
    Tensor w_down; // [d_model x d_ff]
};

struct FrozenWeights {
    BackboneConfig config;
    Tensor tok_embed; // [vocab x d_model]
    Tensor pos_embed; // [max_seq_len x d_model]
    std::vector<LayerWeights> layers;
    Tensor final_norm; // [d_model]
    Tensor lm_head; // [vocab x d_model]

    void for_each_tensor(const std::function<void(const std::string&, Tensor&)>& fn);
    void for_each_tensor(const std::function<void(const std::string&, const Tensor&)>& fn) const;
};

// Hidden states after the embedding (index 0) and after each block
// (indices 1..n_layers); layer l's hidden state is hidden[l + 1].
struct LayerTrace {
    std::vector<Tensor> hidden;
};

// Deterministic seeded init; Gaussian std 0.02 for all weight matrices,
// norm gains at 1.
FrozenWeights init_backbone(const BackboneConfig& config);

// Negative indices count from the end; out of range -> ConfigError.
int resolve_layer_index(int idx, int n_layers);

// Captures per-module projection outputs (post-injection when a context is
// active) for paired-pass comparisons.
struct ForwardCapture {
    std::map<ModuleKey, Tensor> module_outputs;
};

struct ForwardOptions {
    bool training = false;
    DetRng* dropout_rng = nullptr;
    ForwardCapture* capture = nullptr;
    bool want_trace = true;
};

struct ForwardResult {
    Tensor logits; // [T x vocab]
    LayerTrace trace;
};

// Causal forward over one sample. When `echo_ctx` is non-null, projections
// listed in adapters.echo_modules receive the Eq.-style masked injection.
ForwardResult forward(const FrozenWeights& w, const AdapterSet& adapters,
                      std::span<const int> tokens, const echo::InjectionContext* echo_ctx,
                      const ForwardOptions& opts = {});

// Whole-batch forward over concatenated true-length rows; attention and
// positions restart per segment, so each sample computes exactly what the
// per-sample forward computes (bitwise, when dropout is off). `echo_ctxs`,
// when non-null, holds one context per sample. Capture is not supported.
struct BatchedForwardResult {
    Tensor logits; // [sum(len) x vocab]
    LayerTrace trace;
    std::vector<int> row_starts; // size samples + 1
};
BatchedForwardResult forward_batched(const FrozenWeights& w, const AdapterSet& adapters,
                                     std::span<const int> tokens_concat,
                                     const std::vector<int>& row_starts,
                                     const std::vector<echo::InjectionContext>* echo_ctxs,
                                     const ForwardOptions& opts = {});

} // namespace echotune
