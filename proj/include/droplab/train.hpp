#pragma once

#include <filesystem>

#include "droplab/data.hpp"
#include "droplab/runconfig.hpp"

namespace droplab {

struct TrainOptions {
    bool resume = false;                // continue from the latest checkpoint in out_dir
    std::filesystem::path resume_from;  // or an explicit checkpoint path
    int64_t stop_after = 0;             // checkpoint and return after this iteration (stand-in
                                        // for interrupting a run; 0 runs to completion)
};

struct TrainResult {
    int64_t final_step = 0;
    double final_train_loss = 0.0;
    double final_val_loss = 0.0;
    double best_val_loss = 0.0;
    int64_t best_step = -1;
    std::filesystem::path final_checkpoint;
    bool already_complete = false;
};

// Runs (or resumes) a training run into out_dir:
//   out_dir/{config.snapshot, metrics.jsonl, metrics.csv, gdv.jsonl, ckpt/step-N.bin}
// Determinism contract: with train.log_wall_time = false, the metrics stream
// is a pure function of (config, corpus bytes).
TrainResult train_run(const RunConfig& config, const Corpus& corpus,
                      const std::filesystem::path& out_dir, const TrainOptions& options = {});

// Loads the corpus named by the data section: a corpus cache file or a
// directory of text files.
Corpus load_corpus(const DataConfig& data);

// Mean eval-mode loss over the fixed eval batch set keyed by (seed, index).
double eval_loss(const ModelParams& params, const Corpus& corpus, uint64_t seed,
                 int64_t batch_size, int64_t seq_len, int64_t batches);

// Rebuilds ModelParams and the run step from a checkpoint's tensors + meta.
struct LoadedRun {
    RunConfig config;
    ModelParams params;
    int64_t step = 0;
    double best_val_loss = 0.0;
    int64_t best_step = -1;
    std::vector<NamedTensor> optimizer_state;
};
LoadedRun load_run_checkpoint(const std::filesystem::path& ckpt_path);

} // namespace droplab
