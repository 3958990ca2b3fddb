#pragma once

#include <cstdint>
#include <vector>

#include "droplab/rng.hpp"
#include "droplab/tensor.hpp"

namespace droplab {

enum class DropoutMode { stochastic, deterministic_annealed, disabled };

// Per-layer dropout state. Stochastic layers only need their RNG stream;
// the annealed curriculum additionally carries a fixed unit permutation so
// the set of enabled units grows monotonically over training.
struct DropoutLayerState {
    DropoutMode mode = DropoutMode::stochastic;
    double current_p = 0.0;
    uint64_t rng_stream = 0;
    std::vector<int32_t> unit_order;          // deterministic_annealed only
    int64_t anneal_cutoff = 0;                // iterations until all units enabled
    bool rescale_by_enabled_fraction = false; // off by default: curriculum, not estimator
};

DropoutLayerState make_stochastic_state(uint64_t rng_stream);

// Builds the fixed unit permutation for a layer of `units` activations.
DropoutLayerState make_annealed_state(int64_t units, int64_t cutoff_iter, Rng rng);

// Training + stochastic mode: y = m * x / (1 - p) with a fresh Bernoulli(p)
// mask per call; gradient flows only through kept units, scaled identically.
// Eval mode, disabled mode, or p == 0: exact identity (the same tensor).
// DomainError when p == 1 (the whole layer would be zeroed) or p outside [0, 1].
Tensor apply_dropout(const Tensor& x, double p, DropoutLayerState& state, bool training,
                     Rng& rng);

// Enabled-unit count at iteration t: ceil(min(1, t / cutoff) * d).
int64_t annealed_enabled_units(const DropoutLayerState& state, int64_t t);

// Deterministic curriculum: the first annealed_enabled_units(t) entries of
// state.unit_order pass through unchanged, the rest are zeroed. No sampling
// and no 1/(1-p) rescale (optional rescale_by_enabled_fraction instead).
Tensor apply_deterministic_annealed(const Tensor& x, int64_t t, const DropoutLayerState& state);

} // namespace droplab
