#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "droplab/error.hpp"
#include "droplab/rng.hpp"

namespace droplab {

// Byte-level vocabulary: ids 0..255 are the raw bytes, then pad/bos/eos.
inline constexpr int32_t kPadToken = 256;
inline constexpr int32_t kBosToken = 257;
inline constexpr int32_t kEosToken = 258;
inline constexpr int64_t kVocabSize = 259;

std::vector<uint16_t> tokenize(std::string_view text);
std::string detokenize(std::span<const uint16_t> tokens); // drops special ids

enum class Split { train, validation };

// Immutable token stream with a contiguous train/validation split and a
// content hash pinning the exact bytes ingested.
struct Corpus {
    std::string name;
    std::vector<uint16_t> tokens;
    uint64_t content_hash = 0;
    int64_t train_end = 0; // tokens [0, train_end) train, rest validation

    int64_t size() const { return static_cast<int64_t>(tokens.size()); }
    int64_t train_size() const { return train_end; }
    int64_t val_size() const { return size() - train_end; }

    static Corpus from_text(std::string name, std::string_view text, double val_fraction);
    // Reads every regular file in `dir` in sorted name order, joining
    // documents with an eos token.
    static Corpus from_text_dir(const std::filesystem::path& dir, double val_fraction);

    void save_cache(const std::filesystem::path& path) const;
    static Corpus load_cache(const std::filesystem::path& path, double val_fraction);
};

enum class Sampling { random_offset, sequential_chunks };

std::string to_string(Sampling sampling);
Sampling sampling_from_string(const std::string& name);

struct BatchPlan {
    uint64_t seed = 1;
    int64_t context_len = 256;
    int64_t batch_size = 8;
    Sampling sampling = Sampling::random_offset;
    uint64_t purpose = streams::kBatchSampling; // substream, so probes never collide
};

struct Batch {
    int64_t batch = 0;
    int64_t seq = 0;
    std::vector<int32_t> inputs;  // row-major [batch, seq]
    std::vector<int32_t> targets; // inputs shifted by one token
};

// Row starting at `offset`: inputs tokens[offset..offset+seq), targets
// shifted by one. Offsets must leave room for the shifted target.
Batch batch_from_offsets(const Corpus& corpus, std::span<const int64_t> offsets, int64_t seq);

// The batch at step t is a pure function of (plan.seed, plan.purpose, split, t).
// Validation offsets never reach into the train block.
Batch make_batches(const Corpus& corpus, const BatchPlan& plan, int64_t step, Split split);

// Deterministic pseudo-English text for the shipped regime recipes; the
// output depends only on (seed, approx_bytes).
std::string synth_text(uint64_t seed, size_t approx_bytes);

} // namespace droplab
