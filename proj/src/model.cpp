#include "echotune/model.hpp"

#include <algorithm>

#include "echotune/error.hpp"

namespace echotune {

std::vector<std::pair<std::string, Tensor>> Model::trainable_parameters() {
    std::vector<std::pair<std::string, Tensor>> out;
    for (auto& [key, ap] : adapters.modules) {
        out.emplace_back(adapter_tensor_name(key.first, key.second, "A"), ap.lora.a);
        out.emplace_back(adapter_tensor_name(key.first, key.second, "B"), ap.lora.b);
        if (ap.kind == AdapterKind::dora) {
            out.emplace_back(adapter_tensor_name(key.first, key.second, "m"), ap.magnitude);
        }
    }
    for (auto& [key, ep] : adapters.echo_modules) {
        out.emplace_back(echo_tensor_name(key.first, key.second, "W1"), ep.w1);
        out.emplace_back(echo_tensor_name(key.first, key.second, "W2"), ep.w2);
        out.emplace_back(echo_tensor_name(key.first, key.second, "U1"), ep.u1);
        out.emplace_back(echo_tensor_name(key.first, key.second, "U2"), ep.u2);
        out.emplace_back(echo_tensor_name(key.first, key.second, "b"), ep.bias);
        out.emplace_back(echo_tensor_name(key.first, key.second, "lambda"), ep.lambda);
    }
    return out;
}

int64_t Model::trainable_count() {
    int64_t n = 0;
    for (auto& [name, t] : trainable_parameters()) n += t.numel();
    return n;
}

void Model::for_each_tensor(const std::function<void(const std::string&, Tensor&)>& fn) {
    backbone.for_each_tensor(fn);
    for (auto& [name, t] : trainable_parameters()) fn(name, t);
}

Model build_model(const BackboneConfig& backbone_cfg, AdapterKind kind,
                  const std::vector<Proj>& adapter_targets, int rank, double alpha,
                  double dropout_p, const echo::EchoConfig& echo_cfg, uint64_t init_seed,
                  std::vector<std::string>* warnings) {
    Model m;
    BackboneConfig cfg = backbone_cfg;
    cfg.seed = static_cast<int>(init_seed);
    m.backbone = init_backbone(cfg);
    m.echo = echo_cfg;

    if (adapter_targets.empty()) throw ConfigError("adapter target projection list is empty");
    std::vector<Proj> targets = adapter_targets;
    std::sort(targets.begin(), targets.end());
    if (std::adjacent_find(targets.begin(), targets.end()) != targets.end()) {
        throw ConfigError("duplicate adapter target projection");
    }

    DetRng adapter_rng(derive_seed(init_seed, "adapter"));
    m.adapters.kind = kind;
    for (int l = 0; l < cfg.n_layers; ++l) {
        for (Proj p : targets) {
            const Tensor& w = [&]() -> const Tensor& {
                const LayerWeights& lw = m.backbone.layers[static_cast<size_t>(l)];
                switch (p) {
                case Proj::q: return lw.wq;
                case Proj::k: return lw.wk;
                case Proj::v: return lw.wv;
                case Proj::o: return lw.wo;
                }
                throw UsageError("bad projection enum");
            }();
            bool capped = false;
            m.adapters.modules.emplace(
                ModuleKey{l, p}, init_adapter(kind, w, rank, alpha, dropout_p, adapter_rng, &capped));
            if (capped && warnings) {
                warnings->push_back("adapter rank capped to " +
                                    std::to_string(std::min(w.dim(0), w.dim(1))) + " for layer " +
                                    std::to_string(l) + " " + proj_name(p));
            }
        }
    }

    if (echo_cfg.enabled) {
        echo_cfg.validate(cfg.n_layers);
        DetRng echo_rng(derive_seed(init_seed, "echo"));
        m.adapters.echo_modules =
            echo::init_echo_modules(echo_cfg, cfg.n_layers, cfg.d_model, cfg.d_model, echo_rng);
    }
    return m;
}

Checkpoint checkpoint_from_model(Model& model, uint64_t config_hash) {
    Checkpoint ckpt;
    ckpt.config_hash = config_hash;
    model.for_each_tensor([&](const std::string& name, Tensor& t) {
        NamedTensor nt;
        nt.name = name;
        nt.shape = t.shape();
        nt.values.assign(t.values().begin(), t.values().end());
        ckpt.tensors.push_back(std::move(nt));
    });
    return ckpt;
}

RestoreReport restore_model(Model& model, const Checkpoint& ckpt, uint64_t expected_hash) {
    RestoreReport report;
    if (ckpt.config_hash != expected_hash) {
        report.hash_match = false;
        report.warnings.push_back("checkpoint config hash " + std::to_string(ckpt.config_hash) +
                                  " does not match current config hash " +
                                  std::to_string(expected_hash));
    }
    model.for_each_tensor([&](const std::string& name, Tensor& t) {
        const NamedTensor* src = ckpt.find(name);
        if (!src) throw CheckpointError("missing tensor '" + name + "' in checkpoint");
        if (src->shape != t.shape()) {
            throw CheckpointError("tensor '" + name + "' has shape " + shape_str(src->shape) +
                                  ", expected " + shape_str(t.shape()));
        }
        t.raw_values().assign(src->values.begin(), src->values.end());
    });
    return report;
}

} // namespace echotune
