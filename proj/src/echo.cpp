#include "echotune/echo.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "echotune/backbone.hpp"
#include "echotune/error.hpp"

namespace echotune {
namespace echo {

namespace {
Counters g_counters;
}

Counters& counters() { return g_counters; }
void reset_counters() { g_counters = Counters{}; }

std::vector<int> EchoConfig::resolved_source_layers(int n_layers) const {
    std::vector<int> out;
    out.reserve(source_layers.size());
    for (int l : source_layers) out.push_back(resolve_layer_index(l, n_layers));
    return out;
}

void EchoConfig::validate(int n_layers) const {
    if (!enabled) return;
    if (bottleneck_dim < 1) {
        throw ConfigError("echo bottleneck_dim must be >= 1, got " + std::to_string(bottleneck_dim));
    }
    if (source_layers.empty()) throw ConfigError("echo source_layers is empty");
    if (target_layers.empty()) throw ConfigError("echo target_layers is empty");
    if (target_projections.empty()) throw ConfigError("echo target_projections is empty");

    int min_source = n_layers;
    for (int l : source_layers) min_source = std::min(min_source, resolve_layer_index(l, n_layers));
    int max_target = -1;
    for (int l : target_layers) max_target = std::max(max_target, resolve_layer_index(l, n_layers));
    if (min_source <= max_target) {
        throw ConfigError("echo source layers must sit strictly deeper than target layers "
                          "(min source " + std::to_string(min_source) + " <= max target " +
                          std::to_string(max_target) + ")");
    }
}

int find_boundary_row(std::span<const int> labels) {
    int first = -1;
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != kIgnoreLabel) {
            first = static_cast<int>(i);
            break;
        }
    }
    if (first < 0) throw DataError("row has no supervised label");
    if (first == 0) throw DataError("supervised answer starts at position 0; no boundary exists");
    // Supervised labels must form one contiguous run.
    size_t i = static_cast<size_t>(first);
    while (i < labels.size() && labels[i] != kIgnoreLabel) ++i;
    for (; i < labels.size(); ++i) {
        if (labels[i] != kIgnoreLabel) {
            throw DataError("supervised labels are not contiguous (gap before position " +
                            std::to_string(i) + ")");
        }
    }
    return first - 1;
}

std::vector<int> find_boundary(std::span<const int> labels, int rows, int cols) {
    if (static_cast<int>(labels.size()) != rows * cols) {
        throw DimensionError("find_boundary: label buffer does not match rows*cols");
    }
    std::vector<int> out(static_cast<size_t>(rows));
    for (int b = 0; b < rows; ++b) {
        out[static_cast<size_t>(b)] =
            find_boundary_row(labels.subspan(static_cast<size_t>(b) * cols, static_cast<size_t>(cols)));
    }
    return out;
}

std::vector<uint8_t> build_answer_mask(std::span<const int> labels) {
    std::vector<uint8_t> mask(labels.size());
    for (size_t i = 0; i < labels.size(); ++i) mask[i] = labels[i] != kIgnoreLabel ? 1 : 0;
    return mask;
}

Tensor extract_echo(const LayerTrace& trace, std::span<const int> source_layers, int t_star) {
    if (source_layers.empty()) throw ConfigError("extract_echo: empty source layer set");
    g_counters.extract_calls++;
    Tensor acc;
    const int pos[1] = {t_star};
    for (int l : source_layers) {
        const size_t idx = static_cast<size_t>(l) + 1; // hidden[l + 1] is layer l's output
        if (idx >= trace.hidden.size()) {
            throw ConfigError("extract_echo: source layer " + std::to_string(l) +
                              " outside trace of " + std::to_string(trace.hidden.size()) + " states");
        }
        Tensor row = gather_rows(trace.hidden[idx], pos);
        acc = acc.defined() ? add(acc, row) : row;
    }
    Tensor z = scale(acc, 1.0 / static_cast<double>(source_layers.size()));
    return reshape(z, {z.dim(1)}).detach();
}

Tensor normalize_echo(const Tensor& z) { return rms_norm_rows(z); }

namespace {

Tensor as_row(const Tensor& z_bar) {
    return z_bar.ndim() == 1 ? reshape(z_bar, {1, static_cast<int>(z_bar.numel())}) : z_bar;
}

Tensor gate_from_row(const Tensor& z_row, const EchoModuleParams& p) {
    const int d_out = p.u2.dim(0);
    Tensor pre = add(matmul(tanh(matmul(z_row, p.u1, false, true)), p.u2, false, true),
                     reshape(p.bias, {1, d_out}));
    return sigmoid(pre);
}

} // namespace

Tensor injection_from_normalized(const Tensor& z_bar, const EchoModuleParams& p) {
    const int d_out = p.w2.dim(0);
    Tensor z_row = as_row(z_bar);
    Tensor e = matmul(tanh(matmul(z_row, p.w1, false, true)), p.w2, false, true);
    Tensor delta = mul(mul(e, gate_from_row(z_row, p)), p.lambda);
    return reshape(delta, {d_out});
}

Tensor compute_gate(const Tensor& z_bar, const EchoModuleParams& p) {
    Tensor gate = gate_from_row(as_row(z_bar), p);
    return reshape(gate, {p.u2.dim(0)});
}

Tensor compute_injection(const Tensor& z, const EchoModuleParams& p) {
    return injection_from_normalized(normalize_echo(z), p);
}

Tensor inject(const Tensor& o, const Tensor& delta, std::span<const uint8_t> mask, int route) {
    if (o.ndim() != 2) throw DimensionError("inject: module output must be 2-D, got " + shape_str(o.shape()));
    const int t = o.dim(0), d = o.dim(1);
    if (delta.numel() != d) {
        throw DimensionError("inject: delta " + shape_str(delta.shape()) + " does not match module width " +
                             std::to_string(d));
    }
    if (static_cast<int>(mask.size()) != t) {
        throw DimensionError("inject: mask length " + std::to_string(mask.size()) + " for " +
                             std::to_string(t) + " positions");
    }
    if (route != 0 && route != 1) throw UsageError("inject: route must be 0 or 1");
    g_counters.inject_calls++;

    std::vector<double> out(o.values().begin(), o.values().end());
    if (route == 1) {
        const double* dv = delta.values().data();
        for (int i = 0; i < t; ++i) {
            if (!mask[static_cast<size_t>(i)]) continue;
            double* row = out.data() + static_cast<size_t>(i) * d;
            for (int j = 0; j < d; ++j) row[j] += dv[j];
        }
    }
    std::vector<uint8_t> mask_copy(mask.begin(), mask.end());
    auto bw = [t, d, route, mask_copy = std::move(mask_copy)](OpBackwardContext& ctx) {
        std::span<const double> g = ctx.out_grad();
        if (double* d_o = ctx.input_grad(0)) {
            for (size_t i = 0; i < g.size(); ++i) d_o[i] += g[i];
        }
        if (route == 1) {
            if (double* d_delta = ctx.input_grad(1)) {
                for (int i = 0; i < t; ++i) {
                    if (!mask_copy[static_cast<size_t>(i)]) continue;
                    const double* grow = g.data() + static_cast<size_t>(i) * d;
                    for (int j = 0; j < d; ++j) d_delta[j] += grow[j];
                }
            }
        }
    };
    return custom_op("inject", {o, delta}, o.shape(), std::move(out), std::move(bw));
}

Tensor inject_batch(const Tensor& o, const std::vector<Tensor>& deltas,
                    std::span<const uint8_t> mask, const std::vector<int>& row_starts, int route) {
    if (o.ndim() != 2) throw DimensionError("inject_batch: module output must be 2-D");
    const int t = o.dim(0), d = o.dim(1);
    if (row_starts.size() != deltas.size() + 1 || row_starts.front() != 0 || row_starts.back() != t) {
        throw DimensionError("inject_batch: segment starts do not match " +
                             std::to_string(deltas.size()) + " samples over " + std::to_string(t) +
                             " rows");
    }
    if (static_cast<int>(mask.size()) != t) {
        throw DimensionError("inject_batch: mask length " + std::to_string(mask.size()) + " for " +
                             std::to_string(t) + " rows");
    }
    for (const Tensor& delta : deltas) {
        if (delta.numel() != d) throw DimensionError("inject_batch: delta width mismatch");
    }
    if (route != 0 && route != 1) throw UsageError("inject_batch: route must be 0 or 1");
    g_counters.inject_calls++;

    std::vector<double> out(o.values().begin(), o.values().end());
    if (route == 1) {
        for (size_t b = 0; b < deltas.size(); ++b) {
            const double* dv = deltas[b].values().data();
            for (int i = row_starts[b]; i < row_starts[b + 1]; ++i) {
                if (!mask[static_cast<size_t>(i)]) continue;
                double* row = out.data() + static_cast<size_t>(i) * d;
                for (int j = 0; j < d; ++j) row[j] += dv[j];
            }
        }
    }
    std::vector<uint8_t> mask_copy(mask.begin(), mask.end());
    auto bw = [d, route, starts = row_starts, mask_copy = std::move(mask_copy)](OpBackwardContext& ctx) {
        std::span<const double> g = ctx.out_grad();
        if (double* d_o = ctx.input_grad(0)) {
            for (size_t i = 0; i < g.size(); ++i) d_o[i] += g[i];
        }
        if (route != 1) return;
        for (int b = 0; b + 1 < static_cast<int>(starts.size()); ++b) {
            double* d_delta = ctx.input_grad(1 + b);
            if (!d_delta) continue;
            for (int i = starts[static_cast<size_t>(b)]; i < starts[static_cast<size_t>(b) + 1]; ++i) {
                if (!mask_copy[static_cast<size_t>(i)]) continue;
                const double* grow = g.data() + static_cast<size_t>(i) * d;
                for (int j = 0; j < d; ++j) d_delta[j] += grow[j];
            }
        }
    };
    std::vector<Tensor> inputs;
    inputs.reserve(deltas.size() + 1);
    inputs.push_back(o);
    for (const Tensor& delta : deltas) inputs.push_back(delta);
    return custom_op("inject_batch", std::move(inputs), o.shape(), std::move(out), std::move(bw));
}

EchoModuleParams init_echo_module(const EchoConfig& cfg, int d_model, int d_out, DetRng& rng) {
    EchoModuleParams p;
    const double bound = 1.0 / std::sqrt(static_cast<double>(d_model));
    auto kaiming = [&](int rows, int cols) {
        std::vector<double> v(static_cast<size_t>(rows) * cols);
        for (auto& e : v) e = rng.uniform(-bound, bound);
        return Tensor::from_values({rows, cols}, std::move(v), true);
    };
    p.w1 = kaiming(cfg.bottleneck_dim, d_model);
    p.u1 = kaiming(cfg.bottleneck_dim, d_model);
    p.w2 = Tensor::zeros({d_out, cfg.bottleneck_dim}, true);
    p.u2 = Tensor::zeros({d_out, cfg.bottleneck_dim}, true);
    p.bias = Tensor::full({d_out}, cfg.gate_bias_init, true);
    p.lambda = Tensor::from_values({1}, {cfg.lambda_init}, true);
    return p;
}

EchoModuleMap init_echo_modules(const EchoConfig& cfg, int n_layers, int d_model, int d_out,
                                DetRng& rng) {
    cfg.validate(n_layers);
    std::vector<int> layers;
    for (int l : cfg.target_layers) layers.push_back(resolve_layer_index(l, n_layers));
    std::sort(layers.begin(), layers.end());
    std::vector<Proj> projs = cfg.target_projections;
    std::sort(projs.begin(), projs.end());

    EchoModuleMap map;
    for (int l : layers) {
        for (Proj p : projs) {
            ModuleKey key{l, p};
            if (map.count(key)) throw ConfigError("duplicate echo target (layer " + std::to_string(l) +
                                                  ", " + proj_name(p) + ")");
            map.emplace(key, init_echo_module(cfg, d_model, d_out, rng));
        }
    }
    return map;
}

int64_t echo_module_param_count(int d_model, int d_out, int bottleneck) {
    return 2ll * bottleneck * d_model + 2ll * d_out * bottleneck + d_out + 1;
}

} // namespace echo
} // namespace echotune
