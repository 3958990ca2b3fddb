#include "droplab/optim.hpp"

#include <cmath>

#include "droplab/error.hpp"

namespace droplab {

std::string to_string(OptimizerKind kind) {
    return kind == OptimizerKind::adamw ? "adamw" : "sgd_momentum";
}

std::string to_string(LrScheduleKind kind) {
    switch (kind) {
    case LrScheduleKind::constant: return "constant";
    case LrScheduleKind::cosine: return "cosine";
    case LrScheduleKind::warmup_cosine: return "warmup_cosine";
    }
    return "?";
}

OptimizerKind optimizer_kind_from_string(const std::string& name) {
    if (name == "adamw") return OptimizerKind::adamw;
    if (name == "sgd_momentum") return OptimizerKind::sgd_momentum;
    throw ConfigError("train.optimizer: unknown optimizer '" + name + "'");
}

LrScheduleKind lr_schedule_from_string(const std::string& name) {
    if (name == "constant") return LrScheduleKind::constant;
    if (name == "cosine") return LrScheduleKind::cosine;
    if (name == "warmup_cosine") return LrScheduleKind::warmup_cosine;
    throw ConfigError("train.lr_schedule: unknown schedule '" + name + "'");
}

namespace {

void check_finite(const std::string& name, std::span<const double> grad) {
    for (size_t i = 0; i < grad.size(); ++i) {
        if (!std::isfinite(grad[i])) {
            throw NumericError("non-finite gradient in parameter '" + name + "' at index " +
                               std::to_string(i) + " (" + std::to_string(grad[i]) + ")");
        }
    }
}

} // namespace

void adamw_update(const std::string& name, std::span<double> param,
                  std::span<const double> grad, std::span<double> m, std::span<double> v,
                  int64_t step, double lr, double beta1, double beta2, double eps,
                  double weight_decay) {
    if (step < 1) throw ContractError("adamw_update: step must be >= 1");
    if (param.size() != grad.size() || param.size() != m.size() || param.size() != v.size()) {
        throw ShapeError("adamw_update: buffer sizes disagree for '" + name + "'");
    }
    check_finite(name, grad);
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (size_t i = 0; i < param.size(); ++i) {
        const double g = grad[i];
        param[i] -= lr * weight_decay * param[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        const double m_hat = m[i] / bc1;
        const double v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
}

void sgd_momentum_update(const std::string& name, std::span<double> param,
                         std::span<const double> grad, std::span<double> velocity, double lr,
                         double momentum, double weight_decay) {
    if (param.size() != grad.size() || param.size() != velocity.size()) {
        throw ShapeError("sgd_momentum_update: buffer sizes disagree for '" + name + "'");
    }
    check_finite(name, grad);
    for (size_t i = 0; i < param.size(); ++i) {
        param[i] -= lr * weight_decay * param[i];
        velocity[i] = momentum * velocity[i] + grad[i];
        param[i] -= lr * velocity[i];
    }
}

Optimizer::Optimizer(OptimizerSettings settings, const ModelParams& params)
    : settings_(settings) {
    for (const auto& nt : params.tensors()) {
        m_.push_back({"opt.m." + nt.name, Tensor::zeros(nt.tensor.shape())});
        if (settings_.kind == OptimizerKind::adamw) {
            v_.push_back({"opt.v." + nt.name, Tensor::zeros(nt.tensor.shape())});
        }
    }
}

void Optimizer::step(ModelParams& params, int64_t step_num, double lr) {
    auto& ts = params.tensors();
    static const std::vector<double> kEmpty;
    for (size_t i = 0; i < ts.size(); ++i) {
        Tensor& p = ts[i].tensor;
        std::vector<double> zeros;
        std::span<const double> g;
        if (p.has_grad()) {
            g = p.grad();
        } else {
            zeros.assign(static_cast<size_t>(p.numel()), 0.0);
            g = zeros;
        }
        if (settings_.kind == OptimizerKind::adamw) {
            adamw_update(ts[i].name, p.mutable_data(), g, m_[i].tensor.mutable_data(),
                         v_[i].tensor.mutable_data(), step_num, lr, settings_.beta1,
                         settings_.beta2, settings_.eps, settings_.weight_decay);
        } else {
            sgd_momentum_update(ts[i].name, p.mutable_data(), g, m_[i].tensor.mutable_data(), lr,
                                settings_.momentum, settings_.weight_decay);
        }
    }
}

std::vector<NamedTensor> Optimizer::state_tensors() const {
    std::vector<NamedTensor> out = m_;
    out.insert(out.end(), v_.begin(), v_.end());
    return out;
}

void Optimizer::load_state_tensors(const std::vector<NamedTensor>& tensors) {
    auto restore = [&](NamedTensor& slot) {
        for (const auto& nt : tensors) {
            if (nt.name == slot.name) {
                if (nt.tensor.shape() != slot.tensor.shape()) {
                    throw DataError("optimizer state: shape mismatch for '" + slot.name + "'");
                }
                std::copy(nt.tensor.data().begin(), nt.tensor.data().end(),
                          slot.tensor.mutable_data().begin());
                return;
            }
        }
        throw DataError("optimizer state: missing tensor '" + slot.name + "'");
    };
    for (auto& s : m_) restore(s);
    for (auto& s : v_) restore(s);
}

double lr_at(LrScheduleKind kind, double base_lr, double min_lr_ratio, int64_t warmup_iters,
             int64_t t, int64_t total_iters) {
    constexpr double kPi = 3.14159265358979323846;
    switch (kind) {
    case LrScheduleKind::constant:
        return base_lr;
    case LrScheduleKind::cosine: {
        const double frac = static_cast<double>(t) / static_cast<double>(total_iters);
        return base_lr * 0.5 * (1.0 + std::cos(kPi * frac));
    }
    case LrScheduleKind::warmup_cosine: {
        if (t < warmup_iters) {
            return base_lr * static_cast<double>(t + 1) / static_cast<double>(warmup_iters);
        }
        const double min_lr = base_lr * min_lr_ratio;
        const double span = static_cast<double>(std::max<int64_t>(1, total_iters - warmup_iters));
        const double frac = static_cast<double>(t - warmup_iters) / span;
        return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + std::cos(kPi * frac));
    }
    }
    throw StateError("lr_at: unreachable");
}

} // namespace droplab
