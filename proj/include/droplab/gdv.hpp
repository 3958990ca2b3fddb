#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "droplab/data.hpp"
#include "droplab/model.hpp"

namespace droplab {

// Behaviour when a probe gradient has zero norm: reject, or drop the pairs
// involving it and renormalize over the remaining ones.
enum class ZeroNormPolicy { reject, skip };

// How parameter tensors group into "layers" for the per-layer cosines.
enum class GdvGrouping { per_block, per_tensor };

std::string to_string(GdvGrouping grouping);
GdvGrouping gdv_grouping_from_string(const std::string& name);

struct GdvLayerStat {
    std::string layer;
    double mean_cosine = 0.0;
};

// Per-checkpoint gradient direction variance record: mean pairwise cosine
// of the minibatch gradients, per layer and aggregated. Lower cosine means
// higher direction variance.
struct GdvSnapshot {
    int64_t step = 0;
    int num_minibatches = 0;
    std::vector<GdvLayerStat> per_layer;
    double gdv = 0.0; // mean over layers of the per-layer means

    nlohmann::json to_json() const;
};

using LayerGrads = std::vector<std::vector<double>>; // |G| flattened vectors

// Mean cosine over ordered pairs i != j, averaged over layers:
// (1 / (|L| * |G| * (|G|-1))) * sum_l sum_{i!=j} cos(g_i^l, g_j^l).
GdvSnapshot gdv(const std::vector<std::string>& layer_names,
                const std::vector<LayerGrads>& grads_per_layer,
                ZeroNormPolicy policy = ZeroNormPolicy::reject);

struct GdvProbeOptions {
    int num_minibatches = 10;
    bool dropout_on = false;
    double dropout_p = 0.1;
    uint64_t seed = 1;
    int64_t batch_size = 8;
    int64_t seq_len = 0; // 0 -> model context_len
    GdvGrouping grouping = GdvGrouping::per_block;
    bool include_embedding = true;
    ZeroNormPolicy zero_norm = ZeroNormPolicy::reject;
    int64_t step_label = 0;
};

// Draws deterministic minibatches from the train split on a dedicated
// stream, computes per-layer loss gradients (training-mode forward, fresh
// masks per minibatch when dropout is on), and feeds gdv(). Parameter
// values are left untouched; gradients are zeroed on exit.
GdvSnapshot gdv_probe(ModelParams& params, const Corpus& corpus, const GdvProbeOptions& options);

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    int64_t worst_index = -1;
    double tolerance = 0.0;
    bool passed = false;
};

// Central finite differences (step h) against tape gradients for every
// parameter. Relative error uses max(|a|, |fd|, 1e-5) as denominator.
// loss_builder must rebuild the scalar loss from the current param values;
// it runs once under a tape and 2N times without one.
GradCheckReport fd_compare(std::vector<NamedTensor>& params,
                           const std::function<Tensor()>& loss_builder, double h,
                           double tolerance);

inline GradCheckReport fd_compare(ModelParams& params,
                                  const std::function<Tensor()>& loss_builder, double h,
                                  double tolerance) {
    return fd_compare(params.tensors(), loss_builder, h, tolerance);
}

// Full-model gradient check on a freshly initialized model of `config`
// against a fixed synthetic batch. ContractError if the model exceeds
// max_params (finite differences are O(params) forwards).
GradCheckReport grad_check(const ModelConfig& config, double tolerance, double h = 1e-5,
                           int64_t max_params = 20000);

} // namespace droplab
