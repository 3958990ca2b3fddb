#include "droplab/model.hpp"

#include <cmath>

#include "droplab/error.hpp"

namespace droplab {

namespace {
constexpr double kLayernormEps = 1e-5;
constexpr double kInitStd = 0.02;
constexpr double kMaskedScore = -1e30;
} // namespace

std::string to_string(DropoutSite site) {
    switch (site) {
    case DropoutSite::embedding_output: return "embedding_output";
    case DropoutSite::attention_output: return "attention_output";
    case DropoutSite::mlp_output: return "mlp_output";
    }
    return "?";
}

DropoutSite dropout_site_from_string(const std::string& name) {
    if (name == "embedding_output") return DropoutSite::embedding_output;
    if (name == "attention_output") return DropoutSite::attention_output;
    if (name == "mlp_output") return DropoutSite::mlp_output;
    throw ConfigError("model.dropout_sites: unknown site '" + name + "'");
}

void ModelConfig::validate() const {
    if (vocab_size <= 0) throw ConfigError("model.vocab_size must be positive");
    if (context_len < 1) throw ConfigError("model.context_len must be >= 1");
    if (d_model <= 0) throw ConfigError("model.d_model must be positive");
    if (n_layers < 0) throw ConfigError("model.n_layers must be non-negative");
    if (n_heads <= 0) throw ConfigError("model.n_heads must be positive");
    if (d_ff <= 0) throw ConfigError("model.d_ff must be positive");
    if (d_model % n_heads != 0) {
        throw ConfigError("model.n_heads " + std::to_string(n_heads) + " must divide d_model " +
                          std::to_string(d_model));
    }
}

int64_t param_count(const ModelConfig& c) {
    const int64_t d = c.d_model;
    const int64_t ff = c.d_ff;
    // ln1 + Q/K/V/O weights + Q/K/V/O biases + ln2 + mlp weights + mlp biases
    const int64_t per_layer = 2 * d + 4 * d * d + 4 * d + 2 * d + 2 * d * ff + ff + d;
    int64_t total = c.vocab_size * d + c.context_len * d + c.n_layers * per_layer + 2 * d;
    if (!c.tied_head) total += d * c.vocab_size;
    return total;
}

namespace {

Tensor init_normal(const Shape& shape, double std, Rng rng) {
    Tensor t = Tensor::zeros(shape, /*requires_grad=*/true);
    auto d = t.mutable_data();
    for (int64_t i = 0; i < t.numel(); ++i) d[i] = rng.normal() * std;
    return t;
}

} // namespace

ModelParams ModelParams::init(const ModelConfig& config, Rng rng) {
    config.validate();
    ModelParams params;
    params.config_ = config;
    auto& ts = params.tensors_;
    const int64_t d = config.d_model;
    const int64_t ff = config.d_ff;
    // Residual output projections start smaller, scaled down by sqrt(2 * layers).
    const double resid_std =
        config.n_layers > 0 ? kInitStd / std::sqrt(2.0 * static_cast<double>(config.n_layers))
                            : kInitStd;
    uint64_t idx = 0;
    auto next = [&]() { return rng.derive(idx++); };
    ts.push_back({"tok_emb", init_normal({config.vocab_size, d}, kInitStd, next())});
    ts.push_back({"pos_emb", init_normal({config.context_len, d}, kInitStd, next())});
    for (int64_t l = 0; l < config.n_layers; ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        ts.push_back({pre + "ln1.g", Tensor::full({d}, 1.0, true)});
        ts.push_back({pre + "ln1.b", Tensor::zeros({d}, true)});
        ts.push_back({pre + "attn.wq", init_normal({d, d}, kInitStd, next())});
        ts.push_back({pre + "attn.bq", Tensor::zeros({d}, true)});
        ts.push_back({pre + "attn.wk", init_normal({d, d}, kInitStd, next())});
        ts.push_back({pre + "attn.bk", Tensor::zeros({d}, true)});
        ts.push_back({pre + "attn.wv", init_normal({d, d}, kInitStd, next())});
        ts.push_back({pre + "attn.bv", Tensor::zeros({d}, true)});
        ts.push_back({pre + "attn.wo", init_normal({d, d}, resid_std, next())});
        ts.push_back({pre + "attn.bo", Tensor::zeros({d}, true)});
        ts.push_back({pre + "ln2.g", Tensor::full({d}, 1.0, true)});
        ts.push_back({pre + "ln2.b", Tensor::zeros({d}, true)});
        ts.push_back({pre + "mlp.w1", init_normal({d, ff}, kInitStd, next())});
        ts.push_back({pre + "mlp.b1", Tensor::zeros({ff}, true)});
        ts.push_back({pre + "mlp.w2", init_normal({ff, d}, resid_std, next())});
        ts.push_back({pre + "mlp.b2", Tensor::zeros({d}, true)});
    }
    ts.push_back({"ln_f.g", Tensor::full({d}, 1.0, true)});
    ts.push_back({"ln_f.b", Tensor::zeros({d}, true)});
    if (!config.tied_head) {
        ts.push_back({"head.w", init_normal({d, config.vocab_size}, kInitStd, next())});
    }
    return params;
}

ModelParams ModelParams::from_tensors(const ModelConfig& config, std::vector<NamedTensor> tensors) {
    config.validate();
    ModelParams params;
    params.config_ = config;
    params.tensors_ = std::move(tensors);
    for (auto& nt : params.tensors_) nt.tensor.set_requires_grad(true);
    ModelParams expected = ModelParams::init(config, Rng(0));
    if (expected.tensors_.size() != params.tensors_.size()) {
        throw DataError("model params: expected " + std::to_string(expected.tensors_.size()) +
                        " tensors, got " + std::to_string(params.tensors_.size()));
    }
    for (size_t i = 0; i < params.tensors_.size(); ++i) {
        if (params.tensors_[i].name != expected.tensors_[i].name ||
            params.tensors_[i].tensor.shape() != expected.tensors_[i].tensor.shape()) {
            throw DataError("model params: tensor " + std::to_string(i) + " is '" +
                            params.tensors_[i].name + "' " +
                            shape_str(params.tensors_[i].tensor.shape()) + ", expected '" +
                            expected.tensors_[i].name + "' " +
                            shape_str(expected.tensors_[i].tensor.shape()));
        }
    }
    return params;
}

Tensor& ModelParams::find(std::string_view name) {
    for (auto& nt : tensors_) {
        if (nt.name == name) return nt.tensor;
    }
    throw StateError("model params: no tensor named '" + std::string(name) + "'");
}

const Tensor& ModelParams::find(std::string_view name) const {
    return const_cast<ModelParams*>(this)->find(name);
}

int64_t ModelParams::total_params() const {
    int64_t n = 0;
    for (const auto& nt : tensors_) n += nt.tensor.numel();
    return n;
}

void ModelParams::zero_grads() {
    for (auto& nt : tensors_) nt.tensor.zero_grad();
}

DropoutStack DropoutStack::stochastic(const ModelConfig& config) {
    DropoutStack stack;
    const size_t sites = static_cast<size_t>(1 + 2 * config.n_layers);
    stack.states.reserve(sites);
    for (size_t i = 0; i < sites; ++i) stack.states.push_back(make_stochastic_state(i));
    return stack;
}

DropoutStack DropoutStack::annealed(const ModelConfig& config, int64_t cutoff_iter, Rng rng) {
    DropoutStack stack;
    const size_t sites = static_cast<size_t>(1 + 2 * config.n_layers);
    stack.states.reserve(sites);
    for (size_t i = 0; i < sites; ++i) {
        stack.states.push_back(
            make_annealed_state(config.d_model, cutoff_iter, rng.derive(streams::kUnitOrder + i)));
    }
    return stack;
}

namespace {

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return ops::add(ops::matmul(x, w), b);
}

Tensor layernorm_affine(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    return ops::add(ops::mul(ops::layernorm(x, -1, kLayernormEps), gain), bias);
}

Tensor causal_mask(int64_t seq) {
    Tensor mask = Tensor::zeros({1, 1, seq, seq});
    auto md = mask.mutable_data();
    for (int64_t i = 0; i < seq; ++i) {
        for (int64_t j = i + 1; j < seq; ++j) md[i * seq + j] = kMaskedScore;
    }
    return mask;
}

} // namespace

Tensor forward(const ModelParams& params, std::span<const int32_t> tokens, int64_t batch,
               int64_t seq, const ForwardRun& run) {
    const ModelConfig& cfg = params.config();
    if (batch <= 0 || seq <= 0 || static_cast<int64_t>(tokens.size()) != batch * seq) {
        throw ShapeError("forward: token buffer does not match batch " + std::to_string(batch) +
                         " x seq " + std::to_string(seq));
    }
    if (seq > cfg.context_len) {
        throw ShapeError("forward: seq " + std::to_string(seq) + " exceeds context_len " +
                         std::to_string(cfg.context_len));
    }
    DropoutStack transient;
    DropoutStack* stack = run.dropout;
    if (stack == nullptr) {
        transient = DropoutStack::stochastic(cfg);
        stack = &transient;
    }
    if (stack->states.size() != static_cast<size_t>(1 + 2 * cfg.n_layers)) {
        throw ContractError("forward: dropout stack has " + std::to_string(stack->states.size()) +
                            " states, model needs " + std::to_string(1 + 2 * cfg.n_layers));
    }

    // One independent mask stream per dropout site; the mask for sample b,
    // element i always uses draw index b*seq*d + i of that stream.
    auto site_dropout = [&](size_t site_idx, const Tensor& x) -> Tensor {
        DropoutLayerState& state = stack->states[site_idx];
        if (!run.training) return x;
        if (state.mode == DropoutMode::deterministic_annealed) {
            return apply_deterministic_annealed(x, run.step, state);
        }
        Rng site_rng = run.rng.derive(streams::kDropoutMask).derive(site_idx);
        return apply_dropout(x, run.p, state, run.training, site_rng);
    };
    const bool want_emb = cfg.dropout_sites.count(DropoutSite::embedding_output) > 0;
    const bool want_attn = cfg.dropout_sites.count(DropoutSite::attention_output) > 0;
    const bool want_mlp = cfg.dropout_sites.count(DropoutSite::mlp_output) > 0;

    const std::vector<int32_t> ids(tokens.begin(), tokens.end());
    const int64_t d = cfg.d_model;
    const int64_t heads = cfg.n_heads;
    const int64_t hd = d / heads;

    Tensor x = ops::add(ops::embedding(params.find("tok_emb"), ids, {batch, seq}),
                        ops::reshape(ops::slice_rows(params.find("pos_emb"), 0, seq), {1, seq, d}));
    if (want_emb) x = site_dropout(0, x);

    const Tensor mask = causal_mask(seq);
    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        Tensor h = layernorm_affine(x, params.find(pre + "ln1.g"), params.find(pre + "ln1.b"));
        Tensor q = linear(h, params.find(pre + "attn.wq"), params.find(pre + "attn.bq"));
        Tensor k = linear(h, params.find(pre + "attn.wk"), params.find(pre + "attn.bk"));
        Tensor v = linear(h, params.find(pre + "attn.wv"), params.find(pre + "attn.bv"));
        Tensor qh = ops::permute(ops::reshape(q, {batch, seq, heads, hd}), {0, 2, 1, 3});
        Tensor kt = ops::permute(ops::reshape(k, {batch, seq, heads, hd}), {0, 2, 3, 1});
        Tensor vh = ops::permute(ops::reshape(v, {batch, seq, heads, hd}), {0, 2, 1, 3});
        Tensor scores = ops::add(ops::scale(ops::matmul(qh, kt), attn_scale), mask);
        Tensor probs = ops::softmax(scores, -1);
        Tensor ctx = ops::reshape(ops::permute(ops::matmul(probs, vh), {0, 2, 1, 3}),
                                  {batch, seq, d});
        Tensor attn_out = linear(ctx, params.find(pre + "attn.wo"), params.find(pre + "attn.bo"));
        if (want_attn && !cfg.attn_dropout_after_residual) {
            attn_out = site_dropout(static_cast<size_t>(1 + l), attn_out);
        }
        x = ops::add(x, attn_out);
        if (want_attn && cfg.attn_dropout_after_residual) {
            x = site_dropout(static_cast<size_t>(1 + l), x);
        }
        Tensor h2 = layernorm_affine(x, params.find(pre + "ln2.g"), params.find(pre + "ln2.b"));
        Tensor m = ops::gelu(linear(h2, params.find(pre + "mlp.w1"), params.find(pre + "mlp.b1")));
        Tensor mlp_out = linear(m, params.find(pre + "mlp.w2"), params.find(pre + "mlp.b2"));
        if (want_mlp) mlp_out = site_dropout(static_cast<size_t>(1 + cfg.n_layers + l), mlp_out);
        x = ops::add(x, mlp_out);
    }
    x = layernorm_affine(x, params.find("ln_f.g"), params.find("ln_f.b"));
    if (cfg.tied_head) {
        return ops::matmul(x, ops::permute(params.find("tok_emb"), {1, 0}));
    }
    return ops::matmul(x, params.find("head.w"));
}

Tensor lm_loss(const Tensor& logits, std::span<const int32_t> targets) {
    return ops::cross_entropy(logits, std::vector<int32_t>(targets.begin(), targets.end()));
}

double perplexity(double loss_nats) { return std::exp(loss_nats); }

} // namespace droplab
