#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "droplab/model.hpp"

namespace droplab {

enum class OptimizerKind { adamw, sgd_momentum };
enum class LrScheduleKind { constant, cosine, warmup_cosine };

std::string to_string(OptimizerKind kind);
std::string to_string(LrScheduleKind kind);
OptimizerKind optimizer_kind_from_string(const std::string& name);
LrScheduleKind lr_schedule_from_string(const std::string& name);

// Decoupled-weight-decay Adam update with bias correction for one tensor.
// `step` starts at 1. Throws NumericError naming the parameter when the
// gradient contains a non-finite value.
void adamw_update(const std::string& name, std::span<double> param,
                  std::span<const double> grad, std::span<double> m, std::span<double> v,
                  int64_t step, double lr, double beta1, double beta2, double eps,
                  double weight_decay);

void sgd_momentum_update(const std::string& name, std::span<double> param,
                         std::span<const double> grad, std::span<double> velocity, double lr,
                         double momentum, double weight_decay);

struct OptimizerSettings {
    OptimizerKind kind = OptimizerKind::adamw;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
    double momentum = 0.9;
};

// Owns the per-parameter moment buffers, aligned with the params' tensor
// order. Moments serialize into checkpoints under "opt." names.
class Optimizer {
public:
    Optimizer(OptimizerSettings settings, const ModelParams& params);

    // Applies one update from the grads currently held by `params`.
    // A missing gradient buffer counts as an all-zero gradient.
    void step(ModelParams& params, int64_t step_num, double lr);

    std::vector<NamedTensor> state_tensors() const;
    void load_state_tensors(const std::vector<NamedTensor>& tensors);
    const OptimizerSettings& settings() const { return settings_; }

private:
    OptimizerSettings settings_;
    std::vector<NamedTensor> m_; // adamw first moment / sgd velocity
    std::vector<NamedTensor> v_; // adamw second moment
};

double lr_at(LrScheduleKind kind, double base_lr, double min_lr_ratio, int64_t warmup_iters,
             int64_t t, int64_t total_iters);

} // namespace droplab
