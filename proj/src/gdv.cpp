#include "droplab/gdv.hpp"

#include <algorithm>
#include <cmath>

#include "droplab/error.hpp"

namespace droplab {

std::string to_string(GdvGrouping grouping) {
    return grouping == GdvGrouping::per_block ? "per_block" : "per_tensor";
}

GdvGrouping gdv_grouping_from_string(const std::string& name) {
    if (name == "per_block") return GdvGrouping::per_block;
    if (name == "per_tensor") return GdvGrouping::per_tensor;
    throw ConfigError("instrumentation.grouping: unknown grouping '" + name + "'");
}

nlohmann::json GdvSnapshot::to_json() const {
    nlohmann::json layers = nlohmann::json::object();
    for (const auto& s : per_layer) layers[s.layer] = s.mean_cosine;
    return nlohmann::json{{"step", step},
                          {"minibatches", num_minibatches},
                          {"gdv", gdv},
                          {"per_layer", layers}};
}

GdvSnapshot gdv(const std::vector<std::string>& layer_names,
                const std::vector<LayerGrads>& grads_per_layer, ZeroNormPolicy policy) {
    if (layer_names.size() != grads_per_layer.size() || layer_names.empty()) {
        throw ContractError("gdv: need one gradient list per layer name");
    }
    GdvSnapshot snap;
    double layer_sum = 0.0;
    for (size_t l = 0; l < grads_per_layer.size(); ++l) {
        const LayerGrads& grads = grads_per_layer[l];
        const size_t g_count = grads.size();
        if (g_count < 2) {
            throw ContractError("gdv: layer '" + layer_names[l] + "' has " +
                                std::to_string(g_count) + " gradients, need at least 2");
        }
        if (l == 0) snap.num_minibatches = static_cast<int>(g_count);
        const size_t dim = grads[0].size();
        std::vector<double> norms(g_count);
        std::vector<bool> usable(g_count, true);
        for (size_t i = 0; i < g_count; ++i) {
            if (grads[i].size() != dim) {
                throw ShapeError("gdv: layer '" + layer_names[l] +
                                 "' has gradients of unequal length");
            }
            double sq = 0.0;
            for (double x : grads[i]) sq += x * x;
            norms[i] = std::sqrt(sq);
            if (norms[i] == 0.0) {
                if (policy == ZeroNormPolicy::reject) {
                    throw ContractError("gdv: zero-norm gradient " + std::to_string(i) +
                                        " in layer '" + layer_names[l] +
                                        "' (set the skip policy to drop its pairs)");
                }
                usable[i] = false;
            }
        }
        double pair_sum = 0.0;
        int64_t pairs = 0;
        for (size_t i = 0; i < g_count; ++i) {
            if (!usable[i]) continue;
            for (size_t j = i + 1; j < g_count; ++j) {
                if (!usable[j]) continue;
                double dot = 0.0;
                for (size_t x = 0; x < dim; ++x) dot += grads[i][x] * grads[j][x];
                const double cos = std::clamp(dot / (norms[i] * norms[j]), -1.0, 1.0);
                pair_sum += 2.0 * cos; // ordered pairs (i,j) and (j,i)
                pairs += 2;
            }
        }
        if (pairs == 0) {
            throw ContractError("gdv: layer '" + layer_names[l] +
                                "' has no usable gradient pairs after the zero-norm skip");
        }
        const double layer_mean = pair_sum / static_cast<double>(pairs);
        snap.per_layer.push_back({layer_names[l], layer_mean});
        layer_sum += layer_mean;
    }
    snap.gdv = layer_sum / static_cast<double>(grads_per_layer.size());
    return snap;
}

namespace {

std::string block_of(const std::string& tensor_name) {
    if (tensor_name == "tok_emb" || tensor_name == "pos_emb") return "embedding";
    if (tensor_name.rfind("ln_f", 0) == 0) return "final";
    if (tensor_name.rfind("head", 0) == 0) return "head";
    const auto dot = tensor_name.find('.');
    return dot == std::string::npos ? tensor_name : tensor_name.substr(0, dot);
}

} // namespace

GdvSnapshot gdv_probe(ModelParams& params, const Corpus& corpus, const GdvProbeOptions& options) {
    if (options.num_minibatches < 2) {
        throw ContractError("gdv_probe: need at least 2 minibatches");
    }
    const ModelConfig& cfg = params.config();
    const int64_t seq = options.seq_len > 0 ? options.seq_len : cfg.context_len;
    BatchPlan plan;
    plan.seed = options.seed;
    plan.context_len = seq;
    plan.batch_size = options.batch_size;
    plan.purpose = streams::kGdvBatches;

    // Layer bucketing in first-appearance order.
    std::vector<std::string> layer_names;
    std::vector<size_t> tensor_to_layer;
    for (const auto& nt : params.tensors()) {
        const std::string layer = options.grouping == GdvGrouping::per_tensor
                                      ? nt.name
                                      : block_of(nt.name);
        auto it = std::find(layer_names.begin(), layer_names.end(), layer);
        if (it == layer_names.end()) {
            layer_names.push_back(layer);
            tensor_to_layer.push_back(layer_names.size() - 1);
        } else {
            tensor_to_layer.push_back(static_cast<size_t>(it - layer_names.begin()));
        }
    }

    std::vector<LayerGrads> grads_per_layer(layer_names.size());
    params.zero_grads();
    for (int mb = 0; mb < options.num_minibatches; ++mb) {
        const Batch batch = make_batches(corpus, plan, mb, Split::train);
        Tape tape;
        ForwardRun run;
        run.training = true;
        run.p = options.dropout_on ? options.dropout_p : 0.0;
        run.rng = Rng(options.seed).derive(streams::kGdvBatches).derive(static_cast<uint64_t>(mb));
        Tensor logits = forward(params, batch.inputs, batch.batch, batch.seq, run);
        Tensor loss = lm_loss(logits, batch.targets);
        tape.backward(loss);

        std::vector<std::vector<double>> layer_vecs(layer_names.size());
        for (size_t t = 0; t < params.tensors().size(); ++t) {
            auto& vec = layer_vecs[tensor_to_layer[t]];
            Tensor& tensor = params.tensors()[t].tensor;
            if (tensor.has_grad()) {
                const auto g = tensor.grad();
                vec.insert(vec.end(), g.begin(), g.end());
            } else {
                vec.insert(vec.end(), static_cast<size_t>(tensor.numel()), 0.0);
            }
        }
        for (size_t l = 0; l < layer_names.size(); ++l) {
            grads_per_layer[l].push_back(std::move(layer_vecs[l]));
        }
        params.zero_grads();
    }

    std::vector<std::string> kept_names;
    std::vector<LayerGrads> kept_grads;
    for (size_t l = 0; l < layer_names.size(); ++l) {
        if (!options.include_embedding && layer_names[l] == "embedding") continue;
        kept_names.push_back(layer_names[l]);
        kept_grads.push_back(std::move(grads_per_layer[l]));
    }

    GdvSnapshot snap = gdv(kept_names, kept_grads, options.zero_norm);
    snap.step = options.step_label;
    return snap;
}

GradCheckReport fd_compare(std::vector<NamedTensor>& params,
                           const std::function<Tensor()>& loss_builder, double h,
                           double tolerance) {
    if (!(h > 0.0)) throw DomainError("fd_compare: step h must be positive");
    for (auto& nt : params) nt.tensor.zero_grad();
    {
        Tape tape;
        Tensor loss = loss_builder();
        tape.backward(loss);
    }
    std::vector<std::vector<double>> autodiff;
    for (auto& nt : params) {
        if (nt.tensor.has_grad()) {
            autodiff.emplace_back(nt.tensor.grad().begin(), nt.tensor.grad().end());
        } else {
            autodiff.emplace_back(static_cast<size_t>(nt.tensor.numel()), 0.0);
        }
        nt.tensor.zero_grad();
    }

    GradCheckReport report;
    report.tolerance = tolerance;
    for (size_t t = 0; t < params.size(); ++t) {
        auto data = params[t].tensor.mutable_data();
        for (size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            data[i] = saved + h;
            const double up = loss_builder().item();
            data[i] = saved - h;
            const double down = loss_builder().item();
            data[i] = saved;
            const double fd = (up - down) / (2.0 * h);
            const double a = autodiff[t][i];
            const double denom = std::max({std::abs(a), std::abs(fd), 1e-5});
            const double rel = std::abs(a - fd) / denom;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = params[t].name;
                report.worst_index = static_cast<int64_t>(i);
            }
        }
    }
    report.passed = report.max_rel_err < tolerance;
    return report;
}

GradCheckReport grad_check(const ModelConfig& config, double tolerance, double h,
                           int64_t max_params) {
    const int64_t count = param_count(config);
    if (count > max_params) {
        throw ContractError("grad_check: model has " + std::to_string(count) +
                            " parameters, limit is " + std::to_string(max_params) +
                            " (finite differences cost O(params) forwards)");
    }
    ModelParams params = ModelParams::init(config, Rng(12345));
    // Fixed synthetic batch; token values only need to be in range.
    const int64_t batch = 2;
    const int64_t seq = std::min<int64_t>(config.context_len, 8);
    Rng rng(777);
    std::vector<int32_t> tokens(static_cast<size_t>(batch * seq));
    std::vector<int32_t> targets(tokens.size());
    for (auto& t : tokens) t = static_cast<int32_t>(rng.below(static_cast<uint64_t>(config.vocab_size)));
    for (auto& t : targets) t = static_cast<int32_t>(rng.below(static_cast<uint64_t>(config.vocab_size)));

    auto loss_builder = [&]() {
        ForwardRun run; // eval-style dropout-free training graph: p = 0
        run.training = true;
        run.p = 0.0;
        run.rng = Rng(1);
        Tensor logits = forward(params, tokens, batch, seq, run);
        return lm_loss(logits, targets);
    };
    return fd_compare(params, loss_builder, h, tolerance);
}

} // namespace droplab
