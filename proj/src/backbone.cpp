#include "echotune/backbone.hpp"

#include <cmath>

#include "echotune/error.hpp"

namespace echotune {

void BackboneConfig::validate() const {
    if (n_layers < 4) throw ConfigError("n_layers must be >= 4, got " + std::to_string(n_layers));
    if (d_model < 1 || n_heads < 1 || d_ff < 1) throw ConfigError("model dimensions must be positive");
    if (d_model % n_heads != 0) {
        throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                          std::to_string(n_heads));
    }
    if (vocab_size < 4) throw ConfigError("vocab_size must be >= 4, got " + std::to_string(vocab_size));
    if (max_seq_len < 8) throw ConfigError("max_seq_len must be >= 8, got " + std::to_string(max_seq_len));
}

int resolve_layer_index(int idx, int n_layers) {
    if (idx < -n_layers || idx >= n_layers) {
        throw ConfigError("layer index " + std::to_string(idx) + " outside [-" +
                          std::to_string(n_layers) + ", " + std::to_string(n_layers) + ")");
    }
    return idx < 0 ? idx + n_layers : idx;
}

namespace {

Tensor gaussian_matrix(int rows, int cols, double std, DetRng& rng) {
    std::vector<double> v(static_cast<size_t>(rows) * cols);
    for (auto& e : v) e = rng.gaussian(0.0, std);
    return Tensor::from_values({rows, cols}, std::move(v), false);
}

} // namespace

FrozenWeights init_backbone(const BackboneConfig& config) {
    config.validate();
    constexpr double kInitStd = 0.02;
    DetRng rng(derive_seed(static_cast<uint64_t>(config.seed), "backbone"));

    FrozenWeights w;
    w.config = config;
    w.tok_embed = gaussian_matrix(config.vocab_size, config.d_model, kInitStd, rng);
    w.pos_embed = gaussian_matrix(config.max_seq_len, config.d_model, kInitStd, rng);
    w.layers.resize(static_cast<size_t>(config.n_layers));
    for (auto& layer : w.layers) {
        layer.attn_norm = Tensor::full({config.d_model}, 1.0);
        layer.wq = gaussian_matrix(config.d_model, config.d_model, kInitStd, rng);
        layer.wk = gaussian_matrix(config.d_model, config.d_model, kInitStd, rng);
        layer.wv = gaussian_matrix(config.d_model, config.d_model, kInitStd, rng);
        layer.wo = gaussian_matrix(config.d_model, config.d_model, kInitStd, rng);
        layer.ffn_norm = Tensor::full({config.d_model}, 1.0);
        layer.w_gate = gaussian_matrix(config.d_ff, config.d_model, kInitStd, rng);
        layer.w_up = gaussian_matrix(config.d_ff, config.d_model, kInitStd, rng);
        layer.w_down = gaussian_matrix(config.d_model, config.d_ff, kInitStd, rng);
    }
    w.final_norm = Tensor::full({config.d_model}, 1.0);
    w.lm_head = gaussian_matrix(config.vocab_size, config.d_model, kInitStd, rng);
    return w;
}

void FrozenWeights::for_each_tensor(const std::function<void(const std::string&, Tensor&)>& fn) {
    fn("backbone.tok_embed", tok_embed);
    fn("backbone.pos_embed", pos_embed);
    for (size_t l = 0; l < layers.size(); ++l) {
        const std::string prefix = "backbone." + std::to_string(l) + ".";
        fn(prefix + "attn_norm", layers[l].attn_norm);
        fn(prefix + "wq", layers[l].wq);
        fn(prefix + "wk", layers[l].wk);
        fn(prefix + "wv", layers[l].wv);
        fn(prefix + "wo", layers[l].wo);
        fn(prefix + "ffn_norm", layers[l].ffn_norm);
        fn(prefix + "w_gate", layers[l].w_gate);
        fn(prefix + "w_up", layers[l].w_up);
        fn(prefix + "w_down", layers[l].w_down);
    }
    fn("backbone.final_norm", final_norm);
    fn("backbone.lm_head", lm_head);
}

void FrozenWeights::for_each_tensor(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
    const_cast<FrozenWeights*>(this)->for_each_tensor(
        [&fn](const std::string& name, Tensor& t) { fn(name, t); });
}

namespace {

const Tensor& projection_weight(const LayerWeights& lw, Proj p) {
    switch (p) {
    case Proj::q: return lw.wq;
    case Proj::k: return lw.wk;
    case Proj::v: return lw.wv;
    case Proj::o: return lw.wo;
    }
    throw UsageError("bad projection enum");
}

// Projection output with adapter and, when configured for this module,
// masked echo injection.
Tensor run_projection(const FrozenWeights& w, const AdapterSet& adapters, int layer, Proj p,
                      const Tensor& input, const echo::InjectionContext* ctx,
                      const ForwardOptions& opts) {
    const Tensor& weight = projection_weight(w.layers[static_cast<size_t>(layer)], p);
    Tensor out;
    if (const AdapterParams* ap = adapters.find(layer, p)) {
        out = adapted_forward(weight, *ap, input, opts.training, opts.dropout_rng);
    } else {
        out = matmul(input, weight, false, true);
    }
    if (ctx != nullptr) {
        if (const echo::EchoModuleParams* ep = adapters.find_echo(layer, p)) {
            Tensor delta = echo::injection_from_normalized(ctx->z_bar, *ep);
            out = echo::inject(out, delta, ctx->mask, ctx->route);
        }
    }
    if (opts.capture) opts.capture->module_outputs[{layer, p}] = out;
    return out;
}

} // namespace

BatchedForwardResult forward_batched(const FrozenWeights& w, const AdapterSet& adapters,
                                     std::span<const int> tokens_concat,
                                     const std::vector<int>& row_starts,
                                     const std::vector<echo::InjectionContext>* echo_ctxs,
                                     const ForwardOptions& opts) {
    const BackboneConfig& cfg = w.config;
    const int n = static_cast<int>(tokens_concat.size());
    if (row_starts.size() < 2 || row_starts.front() != 0 || row_starts.back() != n) {
        throw DimensionError("forward_batched: row segments do not cover the token buffer");
    }
    const int samples = static_cast<int>(row_starts.size()) - 1;
    for (int b = 0; b < samples; ++b) {
        const int len = row_starts[static_cast<size_t>(b) + 1] - row_starts[static_cast<size_t>(b)];
        if (len < 1 || len > cfg.max_seq_len) {
            throw DataError("forward_batched: sample " + std::to_string(b) + " has length " +
                            std::to_string(len));
        }
    }
    for (int tok : tokens_concat) {
        if (tok < 0 || tok >= cfg.vocab_size) {
            throw DataError("forward_batched: token " + std::to_string(tok) +
                            " outside vocabulary [0, " + std::to_string(cfg.vocab_size) + ")");
        }
    }
    for (const auto& [key, params] : adapters.echo_modules) {
        if (key.first < 0 || key.first >= cfg.n_layers) {
            throw ConfigError("echo module references layer " + std::to_string(key.first) +
                              " outside [0, " + std::to_string(cfg.n_layers) + ")");
        }
    }
    std::vector<uint8_t> mask_concat;
    int route = 0;
    if (echo_ctxs) {
        if (static_cast<int>(echo_ctxs->size()) != samples) {
            throw DimensionError("forward_batched: expected one injection context per sample");
        }
        mask_concat.reserve(static_cast<size_t>(n));
        route = (*echo_ctxs)[0].route;
        for (int b = 0; b < samples; ++b) {
            const echo::InjectionContext& ctx = (*echo_ctxs)[static_cast<size_t>(b)];
            const int len = row_starts[static_cast<size_t>(b) + 1] - row_starts[static_cast<size_t>(b)];
            if (static_cast<int>(ctx.mask.size()) != len) {
                throw DimensionError("forward_batched: mask length mismatch for sample " +
                                     std::to_string(b));
            }
            if (ctx.route != route) {
                throw UsageError("forward_batched: all samples share one routing state per step");
            }
            mask_concat.insert(mask_concat.end(), ctx.mask.begin(), ctx.mask.end());
        }
    }

    std::vector<int> positions(static_cast<size_t>(n));
    for (int b = 0; b < samples; ++b) {
        for (int i = row_starts[static_cast<size_t>(b)]; i < row_starts[static_cast<size_t>(b) + 1]; ++i) {
            positions[static_cast<size_t>(i)] = i - row_starts[static_cast<size_t>(b)];
        }
    }

    Tensor x = add(gather_rows(w.tok_embed, tokens_concat), gather_rows(w.pos_embed, positions));
    BatchedForwardResult result;
    result.row_starts = row_starts;
    if (opts.want_trace) result.trace.hidden.push_back(x);

    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));

    auto project = [&](int layer, Proj p, const Tensor& input) {
        const Tensor& weight = projection_weight(w.layers[static_cast<size_t>(layer)], p);
        Tensor out;
        if (const AdapterParams* ap = adapters.find(layer, p)) {
            out = adapted_forward(weight, *ap, input, opts.training, opts.dropout_rng);
        } else {
            out = matmul(input, weight, false, true);
        }
        if (echo_ctxs) {
            if (const echo::EchoModuleParams* ep = adapters.find_echo(layer, p)) {
                std::vector<Tensor> deltas;
                deltas.reserve(static_cast<size_t>(samples));
                for (int b = 0; b < samples; ++b) {
                    deltas.push_back(
                        echo::injection_from_normalized((*echo_ctxs)[static_cast<size_t>(b)].z_bar, *ep));
                }
                out = echo::inject_batch(out, deltas, mask_concat, row_starts, route);
            }
        }
        return out;
    };

    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = w.layers[static_cast<size_t>(l)];
        Tensor a = mul_rowvec(rms_norm_rows(x), lw.attn_norm);
        Tensor q = project(l, Proj::q, a);
        Tensor k = project(l, Proj::k, a);
        Tensor v = project(l, Proj::v, a);
        Tensor mixed = causal_attention_segments(q, k, v, cfg.n_heads, attn_scale, row_starts);
        Tensor attn_out = project(l, Proj::o, mixed);
        x = add(x, attn_out);

        Tensor f_in = mul_rowvec(rms_norm_rows(x), lw.ffn_norm);
        Tensor gate = matmul(f_in, lw.w_gate, false, true);
        Tensor up = matmul(f_in, lw.w_up, false, true);
        Tensor ffn_out = matmul(mul(silu(gate), up), lw.w_down, false, true);
        x = add(x, ffn_out);
        if (opts.want_trace) result.trace.hidden.push_back(x);
    }

    Tensor final_h = mul_rowvec(rms_norm_rows(x), w.final_norm);
    result.logits = matmul(final_h, w.lm_head, false, true);
    return result;
}

ForwardResult forward(const FrozenWeights& w, const AdapterSet& adapters,
                      std::span<const int> tokens, const echo::InjectionContext* echo_ctx,
                      const ForwardOptions& opts) {
    const BackboneConfig& cfg = w.config;
    const int t = static_cast<int>(tokens.size());
    if (t < 1) throw DataError("forward: empty token sequence");
    if (t > cfg.max_seq_len) {
        throw DataError("forward: sequence length " + std::to_string(t) + " exceeds max_seq_len " +
                        std::to_string(cfg.max_seq_len));
    }
    for (int tok : tokens) {
        if (tok < 0 || tok >= cfg.vocab_size) {
            throw DataError("forward: token " + std::to_string(tok) + " outside vocabulary [0, " +
                            std::to_string(cfg.vocab_size) + ")");
        }
    }
    for (const auto& [key, params] : adapters.echo_modules) {
        if (key.first < 0 || key.first >= cfg.n_layers) {
            throw ConfigError("echo module references layer " + std::to_string(key.first) +
                              " outside [0, " + std::to_string(cfg.n_layers) + ")");
        }
    }
    if (echo_ctx != nullptr && static_cast<int>(echo_ctx->mask.size()) != t) {
        throw DimensionError("forward: injection mask length " + std::to_string(echo_ctx->mask.size()) +
                             " for sequence of " + std::to_string(t) + " tokens");
    }

    std::vector<int> positions(static_cast<size_t>(t));
    for (int i = 0; i < t; ++i) positions[static_cast<size_t>(i)] = i;

    Tensor x = add(gather_rows(w.tok_embed, tokens), gather_rows(w.pos_embed, positions));
    ForwardResult result;
    if (opts.want_trace) result.trace.hidden.push_back(x);

    const int n_heads = cfg.n_heads;
    const int head_dim = cfg.head_dim();
    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = w.layers[static_cast<size_t>(l)];
        Tensor a = mul_rowvec(rms_norm_rows(x), lw.attn_norm);
        Tensor q = run_projection(w, adapters, l, Proj::q, a, echo_ctx, opts);
        Tensor k = run_projection(w, adapters, l, Proj::k, a, echo_ctx, opts);
        Tensor v = run_projection(w, adapters, l, Proj::v, a, echo_ctx, opts);

        Tensor mixed = causal_attention(q, k, v, n_heads, attn_scale);
        Tensor attn_out = run_projection(w, adapters, l, Proj::o, mixed, echo_ctx, opts);
        x = add(x, attn_out);

        Tensor f_in = mul_rowvec(rms_norm_rows(x), lw.ffn_norm);
        Tensor gate = matmul(f_in, lw.w_gate, false, true);
        Tensor up = matmul(f_in, lw.w_up, false, true);
        Tensor ffn_out = matmul(mul(silu(gate), up), lw.w_down, false, true);
        x = add(x, ffn_out);
        if (opts.want_trace) result.trace.hidden.push_back(x);
    }

    Tensor final_h = mul_rowvec(rms_norm_rows(x), w.final_norm);
    result.logits = matmul(final_h, w.lm_head, false, true);
    return result;
}

} // namespace echotune
