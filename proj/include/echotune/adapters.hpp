#pragma once

#include <map>
#include <vector>

#include "echotune/echo.hpp"
#include "echotune/rng.hpp"
#include "echotune/tensor.hpp"
#include "echotune/types.hpp"

namespace echotune {

struct Checkpoint; // checkpoint.hpp

// Low-rank update o = u W^T + (alpha/r) (u A^T) B^T. B starts at zero so
// the adapted module initially equals the frozen one.
struct LoraParams {
    Tensor a; // [r x d_in]
    Tensor b; // [d_out x r]
    int rank = 0;
    double alpha = 0.0;
    double dropout_p = 0.0;

    double scaling() const { return alpha / rank; }
};

// One adapter attached to a projection; for DoRA the low-rank update acts on
// the direction and `magnitude` rescales each output row.
struct AdapterParams {
    AdapterKind kind = AdapterKind::lora;
    LoraParams lora;
    Tensor magnitude; // [d_out], defined iff kind == dora
};

struct AdapterSet {
    AdapterKind kind = AdapterKind::lora;
    std::map<ModuleKey, AdapterParams> modules;
    // Echo projection/gating parameters, co-serialized with the adapters.
    echo::EchoModuleMap echo_modules;

    const AdapterParams* find(int layer, Proj p) const;
    const echo::EchoModuleParams* find_echo(int layer, Proj p) const;
};

// Minimum guard used when normalizing DoRA direction rows.
inline constexpr double kDoraNormFloor = 1e-8;

// u: [T x d_in] activations; W frozen [d_out x d_in].
Tensor lora_forward(const Tensor& w, const LoraParams& p, const Tensor& u, bool training = false,
                    DetRng* dropout_rng = nullptr);
Tensor dora_forward(const Tensor& w, const AdapterParams& p, const Tensor& u);
Tensor adapted_forward(const Tensor& w, const AdapterParams& p, const Tensor& u,
                       bool training = false, DetRng* dropout_rng = nullptr);

// Dense merged weight W + (alpha/r) B A (plain values, no tape).
Tensor merge_lora(const Tensor& w, const LoraParams& p);
// Explicit magnitude * row-normalized(W + (alpha/r) B A) matrix.
Tensor merge_dora(const Tensor& w, const AdapterParams& p);
Tensor merge_adapter(const Tensor& w, const AdapterParams& p);

// Fresh adapter for a [d_out x d_in] weight: A Kaiming-uniform, B zeros;
// for DoRA, magnitude = row norms of W. Rank larger than min(d_in, d_out)
// is capped (reported through `capped`, may be null).
AdapterParams init_adapter(AdapterKind kind, const Tensor& w, int rank, double alpha,
                           double dropout_p, DetRng& rng, bool* capped = nullptr);

// Deployment checkpoint: every tensor named echo.* removed.
Checkpoint strip_echo(const Checkpoint& full);

std::string adapter_tensor_name(int layer, Proj p, const char* field);
std::string echo_tensor_name(int layer, Proj p, const char* field);

} // namespace echotune
