#include "echotune/objective.hpp"

#include <algorithm>
#include <cmath>

#include "echotune/error.hpp"

namespace echotune {

void ObjectiveConfig::validate() const {
    if (!(tau > 0.0)) throw ConfigError("tau must be positive, got " + std::to_string(tau));
    if (lambda_kd < 0.0) throw ConfigError("lambda_kd must be >= 0, got " + std::to_string(lambda_kd));
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
        throw ConfigError("adam betas must lie in [0, 1)");
    }
    if (!(eps > 0.0)) throw ConfigError("adam eps must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
}

namespace {

// Teacher distributions softmax(row / tau) for the selected rows, computed
// from raw values so the graph never sees the teacher side.
std::vector<double> teacher_rows(const Tensor& logits, std::span<const int> rows, double tau) {
    const int v = logits.dim(1);
    const double* lv = logits.values().data();
    std::vector<double> q(rows.size() * static_cast<size_t>(v));
    for (size_t r = 0; r < rows.size(); ++r) {
        const double* row = lv + static_cast<int64_t>(rows[r]) * v;
        double mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < v; ++j) {
            double e = std::exp((row[j] - mx) / tau);
            q[r * static_cast<size_t>(v) + j] = e;
            z += e;
        }
        for (int j = 0; j < v; ++j) q[r * static_cast<size_t>(v) + j] /= z;
    }
    return q;
}

// Unnormalized sum over rows of KL(q_on || softmax(student_row / tau)).
// Single fused node: the backward writes (1/tau) (q_off - q_on) directly.
Tensor kd_sum_node(const Tensor& student_rows_t, std::vector<double> q_on, double tau) {
    const int n = student_rows_t.dim(0), v = student_rows_t.dim(1);
    const double* sv = student_rows_t.values().data();
    std::vector<double> q_off(static_cast<size_t>(n) * v);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const double* row = sv + static_cast<int64_t>(i) * v;
        double mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < v; ++j) {
            double e = std::exp((row[j] - mx) / tau);
            q_off[static_cast<size_t>(i) * v + j] = e;
            z += e;
        }
        const double log_z = std::log(z);
        for (int j = 0; j < v; ++j) q_off[static_cast<size_t>(i) * v + j] /= z;
        for (int j = 0; j < v; ++j) {
            const double qj = q_on[static_cast<size_t>(i) * v + j];
            if (qj <= 0.0) continue;
            const double log_student = (row[j] - mx) / tau - log_z;
            total += qj * (std::log(qj) - log_student);
        }
    }
    auto bw = [n, v, tau, q_on = std::move(q_on), q_off = std::move(q_off)](OpBackwardContext& ctx) {
        double* ds = ctx.input_grad(0);
        if (!ds) return;
        const double g = ctx.out_grad()[0];
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < v; ++j) {
                const size_t idx = static_cast<size_t>(i) * v + j;
                ds[idx] += g * (q_off[idx] - q_on[idx]) / tau;
            }
        }
    };
    return custom_op("kd_sum", {student_rows_t}, {1}, {total}, std::move(bw));
}

Tensor kd_sum_for(const Tensor& logits_on, const Tensor& logits_off, std::span<const int> rows,
                  double tau) {
    if (logits_on.shape() != logits_off.shape()) {
        throw DimensionError("kd_loss: teacher " + shape_str(logits_on.shape()) + " vs student " +
                             shape_str(logits_off.shape()));
    }
    for (int r : rows) {
        if (r < 0 || r >= logits_off.dim(0)) {
            throw UsageError("kd_loss: row " + std::to_string(r) + " outside logits of " +
                             std::to_string(logits_off.dim(0)) + " rows");
        }
    }
    Tensor student = gather_rows(logits_off, rows);
    return kd_sum_node(student, teacher_rows(logits_on, rows, tau), tau);
}

} // namespace

KdResult kd_loss(const Tensor& logits_on, const Tensor& logits_off, std::span<const int> rows,
                 double tau) {
    if (!(tau > 0.0)) throw UsageError("kd_loss: tau must be positive");
    if (rows.empty()) return {Tensor::scalar(0.0), 0};
    Tensor s = kd_sum_for(logits_on, logits_off, rows, tau);
    return {scale(s, tau * tau / static_cast<double>(rows.size())), static_cast<int>(rows.size())};
}

KdResult kd_loss_batch(std::span<const Tensor> logits_on, std::span<const Tensor> logits_off,
                       const std::vector<std::vector<int>>& rows, double tau) {
    if (!(tau > 0.0)) throw UsageError("kd_loss: tau must be positive");
    if (logits_on.size() != logits_off.size() || logits_on.size() != rows.size()) {
        throw DimensionError("kd_loss_batch: mismatched sample counts");
    }
    Tensor acc;
    int positions = 0;
    for (size_t b = 0; b < rows.size(); ++b) {
        if (rows[b].empty()) continue;
        Tensor s = kd_sum_for(logits_on[b], logits_off[b], rows[b], tau);
        acc = acc.defined() ? add(acc, s) : s;
        positions += static_cast<int>(rows[b].size());
    }
    if (positions == 0) return {Tensor::scalar(0.0), 0};
    return {scale(acc, tau * tau / static_cast<double>(positions)), positions};
}

// --------------------------------------------------------------------------
// optimizer
// --------------------------------------------------------------------------

AdamW::AdamW(std::vector<Tensor> params, const ObjectiveConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
    cfg_.validate();
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        m_.emplace_back(static_cast<size_t>(p.numel()), 0.0);
        v_.emplace_back(static_cast<size_t>(p.numel()), 0.0);
    }
}

void AdamW::step() {
    // Validate all gradients before mutating anything, so a bad gradient
    // leaves parameters and moments untouched.
    for (const auto& p : params_) {
        for (double g : p.grad()) {
            if (!std::isfinite(g)) throw NumericError("optimizer step aborted: non-finite gradient");
        }
    }
    ++t_;
    const double bias1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bias2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double step_size = cfg_.lr * std::sqrt(bias2) / bias1;
    for (size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        std::vector<double>& w = p.raw_values();
        std::span<const double> g = p.grad();
        std::vector<double>& m = m_[i];
        std::vector<double>& v = v_[i];
        for (size_t j = 0; j < w.size(); ++j) {
            const double gj = g.empty() ? 0.0 : g[j];
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
            w[j] -= step_size * m[j] / (std::sqrt(v[j]) + cfg_.eps);
            if (cfg_.weight_decay != 0.0) w[j] -= cfg_.lr * cfg_.weight_decay * w[j];
        }
    }
}

void AdamW::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

// --------------------------------------------------------------------------
// two-pass losses
// --------------------------------------------------------------------------

TwoPassLosses two_pass_losses(Model& model, const Batch& batch, int route,
                              const ObjectiveConfig& obj, DetRng* dropout_rng,
                              const TwoPassOverrides* overrides) {
    obj.validate();
    const bool use_echo = model.echo.enabled;
    if (route == 1 && !use_echo) throw UsageError("routed on-pass requires the echo path enabled");

    std::vector<int> sources;
    if (use_echo) sources = model.echo.resolved_source_layers(model.backbone.config.n_layers);

    ForwardOptions pass1_opts;
    pass1_opts.training = true;
    pass1_opts.dropout_rng = dropout_rng;
    pass1_opts.want_trace = use_echo;
    ForwardOptions pass2_opts = pass1_opts;
    pass2_opts.want_trace = false;

    TwoPassLosses out;
    out.route = route;

    // Concatenate true-length rows; the whole batch runs as one graph.
    std::vector<int> tokens_concat;
    std::vector<int> row_starts{0};
    for (int b = 0; b < batch.rows; ++b) {
        std::span<const int> tokens = batch.row_tokens(b);
        tokens_concat.insert(tokens_concat.end(), tokens.begin(), tokens.end());
        row_starts.push_back(static_cast<int>(tokens_concat.size()));
    }

    BatchedForwardResult pass1 = forward_batched(model.backbone, model.adapters, tokens_concat,
                                                 row_starts, nullptr, pass1_opts);

    // Row i of the aligned logits is the prediction of token i + 1 of its
    // sample; the last row of each sample predicts nothing.
    std::vector<int> aligned_idx;
    std::vector<int> aligned_starts{0};
    std::vector<int> shifted_labels;
    std::vector<int> kd_rows;
    for (int b = 0; b < batch.rows; ++b) {
        std::span<const int> labels = batch.row_labels(b);
        const int len = static_cast<int>(labels.size());
        for (int i = 0; i + 1 < len; ++i) {
            if (labels[static_cast<size_t>(i) + 1] != kIgnoreLabel) {
                kd_rows.push_back(static_cast<int>(aligned_idx.size()));
            }
            aligned_idx.push_back(row_starts[static_cast<size_t>(b)] + i);
            shifted_labels.push_back(labels[static_cast<size_t>(i) + 1]);
        }
        aligned_starts.push_back(static_cast<int>(aligned_idx.size()));
    }

    Tensor aligned_off = gather_rows(pass1.logits, aligned_idx);
    MaskedCeResult ce = masked_cross_entropy(aligned_off, shifted_labels);
    if (ce.empty_mask()) throw DataError("batch has no supervised label");
    out.off = ce.mean;

    auto per_sample_views = [&](const Tensor& aligned_all) {
        std::vector<Tensor> views;
        views.reserve(static_cast<size_t>(batch.rows));
        for (int b = 0; b < batch.rows; ++b) {
            std::vector<int> idx;
            for (int i = aligned_starts[static_cast<size_t>(b)]; i < aligned_starts[static_cast<size_t>(b) + 1]; ++i) {
                idx.push_back(i);
            }
            views.push_back(gather_rows(aligned_all, idx));
        }
        return views;
    };
    out.off_logits = per_sample_views(aligned_off);

    if (use_echo) {
        for (int b = 0; b < batch.rows; ++b) {
            if (overrides && overrides->z_bars) {
                out.z_bars.push_back((*overrides->z_bars)[static_cast<size_t>(b)]);
            } else {
                Tensor z = echo::extract_echo(
                    pass1.trace, sources,
                    row_starts[static_cast<size_t>(b)] + batch.t_star[static_cast<size_t>(b)]);
                out.z_bars.push_back(echo::normalize_echo(z));
            }
        }
    }

    if (route == 1) {
        std::vector<echo::InjectionContext> ctxs(static_cast<size_t>(batch.rows));
        for (int b = 0; b < batch.rows; ++b) {
            echo::InjectionContext& ctx = ctxs[static_cast<size_t>(b)];
            ctx.z_bar = out.z_bars[static_cast<size_t>(b)];
            ctx.route = 1;
            if (model.echo.answer_only_mask) {
                std::span<const uint8_t> m = batch.row_mask(b);
                ctx.mask.assign(m.begin(), m.end());
            } else {
                ctx.mask.assign(static_cast<size_t>(batch.length[static_cast<size_t>(b)]), 1);
            }
        }
        BatchedForwardResult pass2 = forward_batched(model.backbone, model.adapters, tokens_concat,
                                                     row_starts, &ctxs, pass2_opts);
        Tensor aligned_on = gather_rows(pass2.logits, aligned_idx);
        MaskedCeResult ce_on = masked_cross_entropy(aligned_on, shifted_labels);
        out.on = ce_on.mean;
        out.on_logits = per_sample_views(aligned_on);

        Tensor teacher = aligned_on;
        if (overrides && overrides->teacher_logits) {
            // Frozen per-sample teacher logits, re-concatenated.
            std::vector<double> values;
            values.reserve(aligned_on.values().size());
            for (const Tensor& t : *overrides->teacher_logits) {
                values.insert(values.end(), t.values().begin(), t.values().end());
            }
            teacher = Tensor::from_values(aligned_on.shape(), std::move(values));
        }
        KdResult kd = kd_loss(teacher, aligned_off, kd_rows, obj.tau);
        out.kd = kd.loss;
        out.total = add(out.off, add(out.on, scale(out.kd, obj.lambda_kd)));
    } else {
        out.total = out.off;
    }

    if (use_echo && !out.z_bars.empty() && !model.adapters.echo_modules.empty()) {
        double acc = 0.0;
        int64_t count = 0;
        for (const Tensor& zb : out.z_bars) {
            for (const auto& [key, ep] : model.adapters.echo_modules) {
                Tensor gate = echo::compute_gate(zb, ep);
                for (double g : gate.values()) acc += g;
                count += gate.numel();
            }
        }
        out.gate_mean = acc / static_cast<double>(count);
        out.has_gate = true;
    }
    return out;
}

double global_grad_norm(std::span<const std::pair<std::string, Tensor>> params) {
    double acc = 0.0;
    for (const auto& [name, p] : params) {
        for (double g : p.grad()) acc += g * g;
    }
    return std::sqrt(acc);
}

StepResult training_step(Model& model, const Batch& batch, int k, RouteSampler* router,
                         AdamW& optimizer, const ObjectiveConfig& obj, DetRng* dropout_rng) {
    StepResult res;
    if (model.echo.enabled) {
        if (!router) throw UsageError("training_step: echo enabled but no route sampler");
        res.prob = router->prob(k);
        res.route = router->sample(k);
    }

    TwoPassLosses losses = two_pass_losses(model, batch, res.route, obj, dropout_rng);
    res.loss_off = losses.off.item();
    res.loss_total = losses.total.item();
    if (res.route == 1) {
        res.loss_on = losses.on.item();
        res.loss_kd = losses.kd.item();
    }
    res.gate_mean = losses.gate_mean;
    res.has_gate = losses.has_gate;
    if (!std::isfinite(res.loss_total)) {
        throw NumericError("training step " + std::to_string(k) + " aborted: non-finite loss (off=" +
                           std::to_string(res.loss_off) + ", on=" + std::to_string(res.loss_on) +
                           ", kd=" + std::to_string(res.loss_kd) + ")");
    }

    backward(losses.total);
    auto params = model.trainable_parameters();
    res.grad_norm = global_grad_norm(params);
    optimizer.step();
    optimizer.zero_grad();
    return res;
}

} // namespace echotune
