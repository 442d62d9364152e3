#include "echotune/adapters.hpp"

#include <algorithm>
#include <cmath>

#include "echotune/checkpoint.hpp"
#include "echotune/error.hpp"

namespace echotune {

const AdapterParams* AdapterSet::find(int layer, Proj p) const {
    auto it = modules.find({layer, p});
    return it == modules.end() ? nullptr : &it->second;
}

const echo::EchoModuleParams* AdapterSet::find_echo(int layer, Proj p) const {
    auto it = echo_modules.find({layer, p});
    return it == echo_modules.end() ? nullptr : &it->second;
}

namespace {

void check_lora_shapes(const Tensor& w, const LoraParams& p) {
    const int d_out = w.dim(0), d_in = w.dim(1);
    if (p.rank < 1) throw ConfigError("lora rank must be >= 1, got " + std::to_string(p.rank));
    if (p.rank > std::min(d_in, d_out)) {
        throw ConfigError("lora rank " + std::to_string(p.rank) + " exceeds min(d_in, d_out) = " +
                          std::to_string(std::min(d_in, d_out)));
    }
    if (p.a.ndim() != 2 || p.a.dim(0) != p.rank || p.a.dim(1) != d_in) {
        throw DimensionError("lora A " + shape_str(p.a.shape()) + " does not match rank " +
                             std::to_string(p.rank) + " x d_in " + std::to_string(d_in));
    }
    if (p.b.ndim() != 2 || p.b.dim(0) != d_out || p.b.dim(1) != p.rank) {
        throw DimensionError("lora B " + shape_str(p.b.shape()) + " does not match d_out " +
                             std::to_string(d_out) + " x rank " + std::to_string(p.rank));
    }
}

} // namespace

Tensor lora_forward(const Tensor& w, const LoraParams& p, const Tensor& u, bool training,
                    DetRng* dropout_rng) {
    check_lora_shapes(w, p);
    Tensor base = matmul(u, w, false, true);
    Tensor low_in = u;
    if (training && p.dropout_p > 0.0 && dropout_rng) {
        low_in = dropout(low_in, p.dropout_p, *dropout_rng);
    }
    Tensor low = matmul(matmul(low_in, p.a, false, true), p.b, false, true);
    return add(base, scale(low, p.scaling()));
}

Tensor dora_forward(const Tensor& w, const AdapterParams& p, const Tensor& u) {
    check_lora_shapes(w, p.lora);
    if (!p.magnitude.defined() || p.magnitude.numel() != w.dim(0)) {
        throw DimensionError("dora magnitude does not match d_out " + std::to_string(w.dim(0)));
    }
    Tensor combined = add(w, scale(matmul(p.lora.b, p.lora.a), p.lora.scaling()));
    Tensor norms = rows_l2norm(combined, kDoraNormFloor);
    Tensor directed = scale_rows(combined, div(p.magnitude, norms));
    return matmul(u, directed, false, true);
}

Tensor adapted_forward(const Tensor& w, const AdapterParams& p, const Tensor& u, bool training,
                       DetRng* dropout_rng) {
    if (p.kind == AdapterKind::lora) return lora_forward(w, p.lora, u, training, dropout_rng);
    return dora_forward(w, p, u);
}

Tensor merge_lora(const Tensor& w, const LoraParams& p) {
    check_lora_shapes(w, p);
    const int d_out = w.dim(0), d_in = w.dim(1), r = p.rank;
    const double s = p.scaling();
    std::vector<double> out(w.values().begin(), w.values().end());
    const double* av = p.a.values().data();
    const double* bv = p.b.values().data();
    for (int i = 0; i < d_out; ++i) {
        for (int k = 0; k < r; ++k) {
            const double bik = s * bv[static_cast<int64_t>(i) * r + k];
            if (bik == 0.0) continue;
            for (int j = 0; j < d_in; ++j) {
                out[static_cast<size_t>(i) * d_in + j] += bik * av[static_cast<int64_t>(k) * d_in + j];
            }
        }
    }
    return Tensor::from_values(w.shape(), std::move(out));
}

Tensor merge_dora(const Tensor& w, const AdapterParams& p) {
    Tensor combined = merge_lora(w, p.lora);
    const int d_out = w.dim(0), d_in = w.dim(1);
    std::vector<double> out(combined.values().begin(), combined.values().end());
    const double* mv = p.magnitude.values().data();
    for (int i = 0; i < d_out; ++i) {
        double acc = 0.0;
        for (int j = 0; j < d_in; ++j) {
            const double e = out[static_cast<size_t>(i) * d_in + j];
            acc += e * e;
        }
        const double norm = std::max(std::sqrt(acc), kDoraNormFloor);
        const double rescale = mv[i] / norm;
        for (int j = 0; j < d_in; ++j) out[static_cast<size_t>(i) * d_in + j] *= rescale;
    }
    return Tensor::from_values(w.shape(), std::move(out));
}

Tensor merge_adapter(const Tensor& w, const AdapterParams& p) {
    return p.kind == AdapterKind::lora ? merge_lora(w, p.lora) : merge_dora(w, p);
}

AdapterParams init_adapter(AdapterKind kind, const Tensor& w, int rank, double alpha,
                           double dropout_p, DetRng& rng, bool* capped) {
    const int d_out = w.dim(0), d_in = w.dim(1);
    int r = rank;
    bool was_capped = false;
    if (r > std::min(d_in, d_out)) {
        r = std::min(d_in, d_out);
        was_capped = true;
    }
    if (capped) *capped = was_capped;
    if (r < 1) throw ConfigError("adapter rank must be >= 1");

    AdapterParams p;
    p.kind = kind;
    p.lora.rank = r;
    p.lora.alpha = alpha;
    p.lora.dropout_p = dropout_p;
    const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
    std::vector<double> a(static_cast<size_t>(r) * d_in);
    for (auto& e : a) e = rng.uniform(-bound, bound);
    p.lora.a = Tensor::from_values({r, d_in}, std::move(a), true);
    p.lora.b = Tensor::zeros({d_out, r}, true);
    if (kind == AdapterKind::dora) {
        std::vector<double> m(static_cast<size_t>(d_out));
        const double* wv = w.values().data();
        for (int i = 0; i < d_out; ++i) {
            double acc = 0.0;
            for (int j = 0; j < d_in; ++j) {
                const double e = wv[static_cast<int64_t>(i) * d_in + j];
                acc += e * e;
            }
            m[static_cast<size_t>(i)] = std::sqrt(acc);
        }
        p.magnitude = Tensor::from_values({d_out}, std::move(m), true);
    }
    return p;
}

Checkpoint strip_echo(const Checkpoint& full) {
    bool has_adapter = false;
    Checkpoint deploy;
    deploy.version = full.version;
    deploy.config_hash = full.config_hash;
    for (const auto& t : full.tensors) {
        if (t.name.rfind("adapter.", 0) == 0) has_adapter = true;
        if (t.name.rfind("echo.", 0) == 0) continue;
        deploy.tensors.push_back(t);
    }
    if (!has_adapter) {
        throw CheckpointError("strip_echo: checkpoint contains no adapter tensors");
    }
    return deploy;
}

std::string adapter_tensor_name(int layer, Proj p, const char* field) {
    return "adapter." + std::to_string(layer) + "." + proj_name(p) + "." + field;
}

std::string echo_tensor_name(int layer, Proj p, const char* field) {
    return "echo." + std::to_string(layer) + "." + proj_name(p) + "." + field;
}

} // namespace echotune
