#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "droplab/data.hpp"
#include "droplab/gdv.hpp"
#include "droplab/model.hpp"
#include "droplab/optim.hpp"
#include "droplab/schedule.hpp"

namespace droplab {

struct TrainConfig {
    int64_t total_iters = 30000;
    int64_t batch_size = 8;
    int64_t seq_len = 0; // 0 -> model context_len
    double lr = 3e-4;
    LrScheduleKind lr_schedule = LrScheduleKind::warmup_cosine;
    int64_t warmup_iters = 0; // 0 -> max(1, total_iters / 20)
    double min_lr_ratio = 0.1;
    OptimizerKind optimizer = OptimizerKind::adamw;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
    double momentum = 0.9;
    uint64_t seed = 1;
    int64_t eval_every = 500;
    int64_t eval_batches = 8;
    int64_t checkpoint_every = 5000; // 0 -> final checkpoint only
    int64_t gdv_every = 0;           // 0 -> off
    bool log_wall_time = true;       // false pins wall_ms to 0 for byte-exact replay

    int64_t effective_warmup() const;
    void validate() const;
};

struct DataConfig {
    std::string corpus; // corpus cache file or text directory
    double val_fraction = 0.1;
    Sampling sampling = Sampling::random_offset;
};

struct InstrumentationConfig {
    int gdv_minibatches = 10;
    double gdv_p = 0.1;
    int64_t gdv_batch_size = 8;
    int64_t gdv_seq_len = 0; // 0 -> model context_len
    GdvGrouping grouping = GdvGrouping::per_block;
    bool include_embedding = true;
};

// The full run description: everything a training run needs, round-trippable
// through the config file. Canonicalized (sorted keys, full form) before
// hashing, so the hash is stable under key reordering in the source file.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    DropoutSchedule schedule;
    DataConfig data;
    InstrumentationConfig instrumentation;

    // Copies train.total_iters into the schedule and validates every section.
    void bind_and_validate();
};

nlohmann::json to_json(const RunConfig& config);
RunConfig run_config_from_json(const nlohmann::json& j); // rejects unknown keys, all listed
RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& config, const std::filesystem::path& path);

uint64_t config_hash(const RunConfig& config);

// "path: <a> vs <b>" lines for every leaf where the two differ.
std::vector<std::string> config_diff(const nlohmann::json& a, const nlohmann::json& b);

// Flattened "section.key (default: value)" listing for --help output.
std::string config_keys_help();

struct MatrixCell {
    std::string name;
    nlohmann::json schedule_overrides; // merged key-by-key over base.schedule
    std::vector<uint64_t> seeds;
};

struct ExperimentMatrix {
    RunConfig base;
    std::vector<MatrixCell> cells;

    struct Expanded {
        std::string run_name; // "<cell>-seed<k>"
        std::string cell_name;
        uint64_t seed;
        RunConfig config;
    };
    std::vector<Expanded> expand() const;
};

ExperimentMatrix load_matrix(const std::filesystem::path& path);

} // namespace droplab
