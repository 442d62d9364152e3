#pragma once

#include <span>
#include <vector>

#include "echotune/data.hpp"
#include "echotune/model.hpp"
#include "echotune/routing.hpp"
#include "echotune/tensor.hpp"

namespace echotune {

struct ObjectiveConfig {
    double lambda_kd = 1.0;
    double tau = 2.0;
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;

    void validate() const;
};

struct StepResult {
    double loss_off = 0.0;
    double loss_on = 0.0; // meaningful iff route == 1
    double loss_kd = 0.0; // meaningful iff route == 1
    double loss_total = 0.0;
    int route = 0;
    double prob = 0.0;
    double grad_norm = 0.0;
    double gate_mean = 0.0;
    bool has_gate = false;
};

struct KdResult {
    Tensor loss; // scalar, already scaled by tau^2 / |A|
    int positions = 0;
    bool empty_mask() const { return positions == 0; }
};

// Masked temperature distillation between two logit tensors over the given
// row indices. The `logits_on` side is the teacher: only its values are
// read, so no gradient can reach it; gradient flows into `logits_off` only.
KdResult kd_loss(const Tensor& logits_on, const Tensor& logits_off, std::span<const int> rows,
                 double tau);
// Batch form: one global position count, matching a sum over samples.
KdResult kd_loss_batch(std::span<const Tensor> logits_on, std::span<const Tensor> logits_off,
                       const std::vector<std::vector<int>>& rows, double tau);

// Adam with decoupled weight decay. Moments persist across steps; a
// non-finite gradient aborts the step before any parameter changes.
class AdamW {
public:
    AdamW(std::vector<Tensor> params, const ObjectiveConfig& cfg);

    void step();
    void zero_grad();
    int64_t steps_taken() const { return t_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    ObjectiveConfig cfg_;
    int64_t t_ = 0;
};

// Pins the two stop-gradient inputs of a step to fixed values. Gradient
// checks need this: the detached echo and the detached distillation teacher
// define the objective, so a finite-difference oracle must hold both fixed
// while parameters are perturbed.
struct TwoPassOverrides {
    const std::vector<Tensor>* z_bars = nullptr;         // per sample
    const std::vector<Tensor>* teacher_logits = nullptr; // per sample, aligned
};

// One two-pass loss graph (no parameter update). Pass 1 always runs and, when
// echo is enabled, extracts the detached per-sample echo; pass 2 runs iff
// route == 1.
struct TwoPassLosses {
    Tensor total;
    Tensor off;
    Tensor on; // defined iff route == 1
    Tensor kd; // defined iff route == 1
    int route = 0;
    double gate_mean = 0.0;
    bool has_gate = false;
    std::vector<Tensor> off_logits; // per sample, next-token aligned
    std::vector<Tensor> on_logits;  // per sample, iff route == 1
    std::vector<Tensor> z_bars;     // per sample, iff echo enabled
};

TwoPassLosses two_pass_losses(Model& model, const Batch& batch, int route,
                              const ObjectiveConfig& obj, DetRng* dropout_rng,
                              const TwoPassOverrides* overrides = nullptr);

// Full training step: routed two-pass losses, backward, AdamW update on
// adapter + echo parameters only.
StepResult training_step(Model& model, const Batch& batch, int k, RouteSampler* router,
                         AdamW& optimizer, const ObjectiveConfig& obj, DetRng* dropout_rng);

double global_grad_norm(std::span<const std::pair<std::string, Tensor>> params);

} // namespace echotune
