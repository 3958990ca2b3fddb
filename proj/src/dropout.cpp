#include "droplab/dropout.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace droplab {

DropoutLayerState make_stochastic_state(uint64_t rng_stream) {
    DropoutLayerState state;
    state.mode = DropoutMode::stochastic;
    state.rng_stream = rng_stream;
    return state;
}

DropoutLayerState make_annealed_state(int64_t units, int64_t cutoff_iter, Rng rng) {
    if (units <= 0) throw DomainError("make_annealed_state: units must be positive");
    if (cutoff_iter <= 0) throw DomainError("make_annealed_state: cutoff_iter must be positive");
    DropoutLayerState state;
    state.mode = DropoutMode::deterministic_annealed;
    state.anneal_cutoff = cutoff_iter;
    state.rng_stream = rng.stream();
    state.unit_order.resize(static_cast<size_t>(units));
    std::iota(state.unit_order.begin(), state.unit_order.end(), 0);
    for (int64_t i = units - 1; i > 0; --i) {
        const auto j = static_cast<int64_t>(rng.below(static_cast<uint64_t>(i + 1)));
        std::swap(state.unit_order[static_cast<size_t>(i)], state.unit_order[static_cast<size_t>(j)]);
    }
    return state;
}

Tensor apply_dropout(const Tensor& x, double p, DropoutLayerState& state, bool training,
                     Rng& rng) {
    if (!(p >= 0.0 && p <= 1.0)) {
        throw DomainError("apply_dropout: ratio " + std::to_string(p) + " outside [0, 1]");
    }
    if (p == 1.0) {
        throw DomainError("apply_dropout: ratio 1 would zero the whole layer");
    }
    state.current_p = training ? p : 0.0;
    if (!training || state.mode == DropoutMode::disabled || p == 0.0) {
        return x;
    }
    Tensor mask = ops::bernoulli_mask(x.shape(), p, rng);
    return ops::scale(ops::mul(x, mask), 1.0 / (1.0 - p));
}

int64_t annealed_enabled_units(const DropoutLayerState& state, int64_t t) {
    if (state.mode != DropoutMode::deterministic_annealed) {
        throw ContractError("annealed_enabled_units: state is not in deterministic_annealed mode");
    }
    if (t < 0) throw DomainError("annealed_enabled_units: negative iteration");
    const auto d = static_cast<int64_t>(state.unit_order.size());
    if (t >= state.anneal_cutoff) return d;
    const double f = static_cast<double>(t) / static_cast<double>(state.anneal_cutoff);
    return static_cast<int64_t>(std::ceil(f * static_cast<double>(d)));
}

Tensor apply_deterministic_annealed(const Tensor& x, int64_t t, const DropoutLayerState& state) {
    const int64_t enabled = annealed_enabled_units(state, t);
    const auto d = static_cast<int64_t>(state.unit_order.size());
    if (x.dim(-1) != d) {
        throw ShapeError("apply_deterministic_annealed: last dim " + std::to_string(x.dim(-1)) +
                         " does not match " + std::to_string(d) + " units");
    }
    if (enabled == d && !state.rescale_by_enabled_fraction) {
        return x;
    }
    Tensor mask = Tensor::zeros({d});
    auto md = mask.mutable_data();
    const double keep = state.rescale_by_enabled_fraction && enabled > 0
                            ? static_cast<double>(d) / static_cast<double>(enabled)
                            : 1.0;
    for (int64_t i = 0; i < enabled; ++i) md[state.unit_order[static_cast<size_t>(i)]] = keep;
    return ops::mul(x, mask);
}

} // namespace droplab
