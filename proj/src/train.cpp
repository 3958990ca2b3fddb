#include "droplab/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <memory>

#include "droplab/checkpoint.hpp"
#include "droplab/hash.hpp"
#include "droplab/metrics.hpp"

namespace droplab {

Corpus load_corpus(const DataConfig& data) {
    if (data.corpus.empty()) throw ConfigError("data.corpus is not set");
    const std::filesystem::path path = data.corpus;
    if (std::filesystem::is_directory(path)) {
        return Corpus::from_text_dir(path, data.val_fraction);
    }
    return Corpus::load_cache(path, data.val_fraction);
}

double eval_loss(const ModelParams& params, const Corpus& corpus, uint64_t seed,
                 int64_t batch_size, int64_t seq_len, int64_t batches) {
    BatchPlan plan;
    plan.seed = seed;
    plan.context_len = seq_len;
    plan.batch_size = batch_size;
    plan.purpose = streams::kEvalBatches;
    double total = 0.0;
    for (int64_t i = 0; i < batches; ++i) {
        const Batch batch = make_batches(corpus, plan, i, Split::validation);
        ForwardRun run; // eval mode: no tape, no dropout
        Tensor logits = forward(params, batch.inputs, batch.batch, batch.seq, run);
        total += lm_loss(logits, batch.targets).item();
    }
    return total / static_cast<double>(batches);
}

LoadedRun load_run_checkpoint(const std::filesystem::path& ckpt_path) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    LoadedRun run;
    try {
        run.config = run_config_from_json(ckpt.meta.at("config"));
        run.step = ckpt.meta.value("step", int64_t{0});
        run.best_val_loss = ckpt.meta.value("best_val_loss", 0.0);
        run.best_step = ckpt.meta.value("best_step", int64_t{-1});
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint: meta block is missing fields: " + std::string(e.what()));
    }
    run.config.bind_and_validate();
    std::vector<NamedTensor> param_tensors;
    for (auto& nt : ckpt.tensors) {
        if (nt.name.rfind("opt.", 0) == 0) {
            run.optimizer_state.push_back(nt);
        } else {
            param_tensors.push_back(nt);
        }
    }
    run.params = ModelParams::from_tensors(run.config.model, std::move(param_tensors));
    return run;
}

namespace {

nlohmann::json checkpoint_meta(const RunConfig& cfg, int64_t step, double best_val,
                               int64_t best_step) {
    return nlohmann::json{{"kind", "train"},
                          {"step", step},
                          {"best_val_loss", best_val},
                          {"best_step", best_step},
                          {"config", to_json(cfg)},
                          {"config_hash", hash_hex(config_hash(cfg))}};
}

std::filesystem::path write_run_checkpoint(const std::filesystem::path& out_dir,
                                           const RunConfig& cfg, const ModelParams& params,
                                           const Optimizer& opt, int64_t step, double best_val,
                                           int64_t best_step) {
    const auto path = out_dir / "ckpt" / ("step-" + std::to_string(step) + ".bin");
    std::vector<NamedTensor> tensors = params.tensors();
    const auto state = opt.state_tensors();
    tensors.insert(tensors.end(), state.begin(), state.end());
    save_checkpoint(path, checkpoint_meta(cfg, step, best_val, best_step), tensors);
    return path;
}

std::filesystem::path latest_checkpoint(const std::filesystem::path& out_dir) {
    const auto dir = out_dir / "ckpt";
    if (!std::filesystem::is_directory(dir)) {
        throw IoError("resume: no checkpoint directory at '" + dir.string() + "'");
    }
    std::filesystem::path best;
    int64_t best_step = -1;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        const std::string stem = entry.path().stem().string();
        if (stem.rfind("step-", 0) != 0) continue;
        const int64_t step = std::strtoll(stem.c_str() + 5, nullptr, 10);
        if (step > best_step) {
            best_step = step;
            best = entry.path();
        }
    }
    if (best_step < 0) throw IoError("resume: no checkpoints found in '" + dir.string() + "'");
    return best;
}

} // namespace

TrainResult train_run(const RunConfig& config, const Corpus& corpus,
                      const std::filesystem::path& out_dir, const TrainOptions& options) {
    RunConfig cfg = config;
    cfg.bind_and_validate();
    std::filesystem::create_directories(out_dir);

    const int64_t seq = cfg.train.seq_len > 0 ? cfg.train.seq_len : cfg.model.context_len;
    const uint64_t seed = cfg.train.seed;

    ModelParams params = ModelParams::init(cfg.model, Rng(seed).derive(streams::kParamInit));
    OptimizerSettings opt_settings{cfg.train.optimizer, cfg.train.beta1, cfg.train.beta2,
                                   cfg.train.eps,       cfg.train.weight_decay,
                                   cfg.train.momentum};
    Optimizer optimizer(opt_settings, params);

    int64_t start_step = 0;
    double best_val = std::numeric_limits<double>::infinity();
    int64_t best_step = -1;

    if (options.resume || !options.resume_from.empty()) {
        const auto ckpt_path =
            options.resume_from.empty() ? latest_checkpoint(out_dir) : options.resume_from;
        LoadedRun loaded = load_run_checkpoint(ckpt_path);
        const std::string want = hash_hex(config_hash(cfg));
        const std::string got = hash_hex(config_hash(loaded.config));
        if (want != got) {
            std::string msg = "resume refused: config does not match checkpoint '" +
                              ckpt_path.string() + "':";
            for (const auto& line : config_diff(to_json(loaded.config), to_json(cfg))) {
                msg += "\n  " + line;
            }
            throw ConfigError(msg);
        }
        params = std::move(loaded.params);
        optimizer.load_state_tensors(loaded.optimizer_state);
        start_step = loaded.step;
        best_val = loaded.best_step >= 0 ? loaded.best_val_loss
                                         : std::numeric_limits<double>::infinity();
        best_step = loaded.best_step;
        if (start_step >= cfg.train.total_iters) {
            TrainResult done;
            done.final_step = start_step;
            done.best_val_loss = best_val;
            done.best_step = best_step;
            done.final_checkpoint = ckpt_path;
            done.already_complete = true;
            return done;
        }
    }

    save_run_config(cfg, out_dir / "config.snapshot");
    const auto metrics_path = out_dir / "metrics.jsonl";
    const bool append = start_step > 0 && std::filesystem::exists(metrics_path);
    JsonlWriter metrics(metrics_path, append);
    std::unique_ptr<JsonlWriter> gdv_log;
    if (cfg.train.gdv_every > 0) {
        gdv_log = std::make_unique<JsonlWriter>(out_dir / "gdv.jsonl", append);
    }

    BatchPlan plan;
    plan.seed = seed;
    plan.context_len = seq;
    plan.batch_size = cfg.train.batch_size;
    plan.sampling = cfg.data.sampling;

    const bool annealed = cfg.schedule.kind == ScheduleKind::annealed_deterministic;
    DropoutStack stack = annealed ? DropoutStack::annealed(cfg.model, cfg.schedule.cutoff_iter,
                                                           Rng(seed).derive(streams::kUnitOrder))
                                  : DropoutStack::stochastic(cfg.model);

    const auto run_start = std::chrono::steady_clock::now();
    auto wall_ms = [&]() -> int64_t {
        if (!cfg.train.log_wall_time) return 0;
        return std::chrono::duration_cast<std::chrono::milliseconds>(
                   std::chrono::steady_clock::now() - run_start)
            .count();
    };

    std::filesystem::path last_ckpt;
    auto annotate_numeric = [&](const NumericError& e) -> NumericError {
        const std::string where =
            last_ckpt.empty() ? std::string("(none)") : last_ckpt.string();
        return NumericError(std::string(e.what()) + "; last good checkpoint: " + where);
    };

    TrainResult result;
    double train_loss = 0.0;
    for (int64_t t = start_step; t < cfg.train.total_iters; ++t) {
        const double p_t = schedule_ratio(cfg.schedule, t);
        const double lr_t = lr_at(cfg.train.lr_schedule, cfg.train.lr, cfg.train.min_lr_ratio,
                                  cfg.train.effective_warmup(), t, cfg.train.total_iters);
        const Batch batch = make_batches(corpus, plan, t, Split::train);
        {
            Tape tape;
            ForwardRun run;
            run.training = true;
            run.p = p_t;
            run.rng = Rng(seed).derive(static_cast<uint64_t>(t));
            run.dropout = &stack;
            run.step = t;
            Tensor logits = forward(params, batch.inputs, batch.batch, batch.seq, run);
            Tensor loss = lm_loss(logits, batch.targets);
            train_loss = loss.item();
            if (!std::isfinite(train_loss)) {
                const std::string where =
                    last_ckpt.empty() ? std::string("(none)") : last_ckpt.string();
                throw NumericError("training loss became non-finite at step " + std::to_string(t) +
                                   "; last good checkpoint: " + where);
            }
            tape.backward(loss);
        }
        try {
            optimizer.step(params, t + 1, lr_t);
        } catch (const NumericError& e) {
            throw annotate_numeric(e);
        }
        params.zero_grads();

        metrics.write(to_json(MetricsRecord{t, "train", train_loss, perplexity(train_loss), p_t,
                                            lr_t, wall_ms()}));

        const int64_t done = t + 1;
        if (done % cfg.train.eval_every == 0 || done == cfg.train.total_iters) {
            const double val = eval_loss(params, corpus, seed, cfg.train.batch_size, seq,
                                         cfg.train.eval_batches);
            metrics.write(to_json(
                MetricsRecord{t, "val", val, perplexity(val), p_t, lr_t, wall_ms()}));
            result.final_val_loss = val;
            if (val < best_val) {
                best_val = val;
                best_step = t;
            }
        }
        if (gdv_log && done % cfg.train.gdv_every == 0) {
            GdvProbeOptions probe;
            probe.num_minibatches = cfg.instrumentation.gdv_minibatches;
            probe.seed = seed;
            probe.batch_size = cfg.instrumentation.gdv_batch_size;
            probe.seq_len = cfg.instrumentation.gdv_seq_len > 0 ? cfg.instrumentation.gdv_seq_len
                                                                : seq;
            probe.grouping = cfg.instrumentation.grouping;
            probe.include_embedding = cfg.instrumentation.include_embedding;
            probe.step_label = done;
            probe.dropout_on = false;
            nlohmann::json off = gdv_probe(params, corpus, probe).to_json();
            off["mode"] = "off";
            off["dropout_p"] = 0.0;
            gdv_log->write(off);
            probe.dropout_on = true;
            probe.dropout_p = cfg.instrumentation.gdv_p;
            nlohmann::json on = gdv_probe(params, corpus, probe).to_json();
            on["mode"] = "on";
            on["dropout_p"] = cfg.instrumentation.gdv_p;
            gdv_log->write(on);
        }
        const bool ckpt_due = cfg.train.checkpoint_every > 0 &&
                              done % cfg.train.checkpoint_every == 0;
        const bool stopping = options.stop_after > 0 && done >= options.stop_after;
        if (ckpt_due || done == cfg.train.total_iters || stopping) {
            last_ckpt = write_run_checkpoint(out_dir, cfg, params, optimizer, done, best_val,
                                             best_step);
        }
        if (stopping && done < cfg.train.total_iters) {
            metrics_jsonl_to_csv(metrics_path, out_dir / "metrics.csv");
            result.final_step = done;
            result.final_train_loss = train_loss;
            result.best_val_loss = best_val;
            result.best_step = best_step;
            result.final_checkpoint = last_ckpt;
            return result;
        }
    }

    metrics_jsonl_to_csv(metrics_path, out_dir / "metrics.csv");
    result.final_step = cfg.train.total_iters;
    result.final_train_loss = train_loss;
    result.best_val_loss = best_val;
    result.best_step = best_step;
    result.final_checkpoint = last_ckpt;
    return result;
}

} // namespace droplab
