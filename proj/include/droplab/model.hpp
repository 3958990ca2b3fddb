#pragma once

#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "droplab/dropout.hpp"
#include "droplab/rng.hpp"
#include "droplab/tensor.hpp"

namespace droplab {

enum class DropoutSite { embedding_output, attention_output, mlp_output };

std::string to_string(DropoutSite site);
DropoutSite dropout_site_from_string(const std::string& name);

// Decoder-only pre-layernorm transformer. Dropout is applied to the output
// of the embedding sum and to each attention block's output projection
// (before the residual add, switchable), plus optionally each MLP output.
struct ModelConfig {
    int64_t vocab_size = 259;
    int64_t context_len = 256;
    int64_t d_model = 128;
    int64_t n_layers = 4;
    int64_t n_heads = 4;
    int64_t d_ff = 512;
    std::set<DropoutSite> dropout_sites = {DropoutSite::embedding_output,
                                           DropoutSite::attention_output};
    bool tied_head = true;
    bool attn_dropout_after_residual = false;

    void validate() const; // throws ConfigError
};

// Exact parameter count for a config; must equal the allocated total.
int64_t param_count(const ModelConfig& config);

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

class ModelParams {
public:
    static ModelParams init(const ModelConfig& config, Rng rng);
    static ModelParams from_tensors(const ModelConfig& config, std::vector<NamedTensor> tensors);

    const ModelConfig& config() const { return config_; }
    std::vector<NamedTensor>& tensors() { return tensors_; }
    const std::vector<NamedTensor>& tensors() const { return tensors_; }
    Tensor& find(std::string_view name);
    const Tensor& find(std::string_view name) const;
    int64_t total_params() const;
    void zero_grads();

private:
    ModelConfig config_;
    std::vector<NamedTensor> tensors_;
};

// One dropout state per application point: index 0 is the embedding output,
// 1..n_layers the attention outputs, n_layers+1..2*n_layers the MLP outputs.
struct DropoutStack {
    std::vector<DropoutLayerState> states;

    static DropoutStack stochastic(const ModelConfig& config);
    static DropoutStack annealed(const ModelConfig& config, int64_t cutoff_iter, Rng rng);
};

struct ForwardRun {
    bool training = false;
    double p = 0.0;
    Rng rng{0};                      // mask source, pre-derived per step by the caller
    DropoutStack* dropout = nullptr; // optional; default transient stochastic states
    int64_t step = 0;                // annealed curriculum clock
};

// tokens are row-major [batch, seq]; returns logits [batch, seq, vocab].
Tensor forward(const ModelParams& params, std::span<const int32_t> tokens, int64_t batch,
               int64_t seq, const ForwardRun& run);

// Mean next-token cross entropy in nats per token.
Tensor lm_loss(const Tensor& logits, std::span<const int32_t> targets);

double perplexity(double loss_nats);

} // namespace droplab
