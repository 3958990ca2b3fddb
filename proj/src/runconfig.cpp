#include "droplab/runconfig.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "droplab/hash.hpp"

namespace droplab {

int64_t TrainConfig::effective_warmup() const {
    if (warmup_iters > 0) return warmup_iters;
    return std::max<int64_t>(1, total_iters / 20);
}

void TrainConfig::validate() const {
    if (total_iters <= 0) throw ConfigError("train.total_iters must be positive");
    if (batch_size <= 0) throw ConfigError("train.batch_size must be positive");
    if (seq_len < 0) throw ConfigError("train.seq_len must be non-negative");
    if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
    if (warmup_iters < 0) throw ConfigError("train.warmup_iters must be non-negative");
    if (!(min_lr_ratio >= 0.0 && min_lr_ratio <= 1.0)) {
        throw ConfigError("train.min_lr_ratio must lie in [0, 1]");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw ConfigError("train.beta1/beta2 must lie in [0, 1)");
    }
    if (!(eps > 0.0)) throw ConfigError("train.eps must be positive");
    if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be non-negative");
    if (eval_every <= 0) throw ConfigError("train.eval_every must be positive");
    if (total_iters % eval_every != 0) {
        throw ConfigError("train.eval_every " + std::to_string(eval_every) +
                          " must divide total_iters " + std::to_string(total_iters));
    }
    if (eval_batches <= 0) throw ConfigError("train.eval_batches must be positive");
    if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be non-negative");
    if (gdv_every < 0) throw ConfigError("train.gdv_every must be non-negative");
}

void RunConfig::bind_and_validate() {
    schedule.total_iters = train.total_iters;
    model.validate();
    train.validate();
    schedule.validate();
    if (!(data.val_fraction > 0.0 && data.val_fraction < 1.0)) {
        throw ConfigError("data.val_fraction must lie in (0, 1)");
    }
    if (train.seq_len > model.context_len) {
        throw ConfigError("train.seq_len " + std::to_string(train.seq_len) +
                          " exceeds model.context_len " + std::to_string(model.context_len));
    }
    if (instrumentation.gdv_minibatches < 2) {
        throw ConfigError("instrumentation.gdv_minibatches must be at least 2");
    }
    if (!(instrumentation.gdv_p >= 0.0 && instrumentation.gdv_p < 1.0)) {
        throw ConfigError("instrumentation.gdv_p must lie in [0, 1)");
    }
    if (instrumentation.gdv_batch_size <= 0) {
        throw ConfigError("instrumentation.gdv_batch_size must be positive");
    }
    if (instrumentation.gdv_seq_len < 0 || instrumentation.gdv_seq_len > model.context_len) {
        throw ConfigError("instrumentation.gdv_seq_len must lie in [0, context_len]");
    }
}

// ---------------------------------------------------------------------------
// JSON serialization
// ---------------------------------------------------------------------------

namespace {

// Reads one section, tracking which keys were consumed so every unknown key
// can be reported at once.
class SectionReader {
public:
    SectionReader(const nlohmann::json& root, const char* section,
                  std::vector<std::string>& unknown)
        : prefix_(std::string(section) + "."), unknown_(unknown) {
        if (root.contains(section)) {
            const auto& node = root.at(section);
            if (!node.is_object()) {
                throw ConfigError("config section '" + std::string(section) +
                                  "' must be an object");
            }
            obj_ = &node;
        }
    }

    template <class T>
    void read(const char* key, T& out) {
        seen_.insert(key);
        if (obj_ && obj_->contains(key)) {
            try {
                out = obj_->at(key).get<T>();
            } catch (const nlohmann::json::exception&) {
                throw ConfigError("config key '" + prefix_ + key + "' has the wrong type");
            }
        }
    }

    template <class T, class F>
    void read_enum(const char* key, T& out, F parse) {
        std::string text;
        bool present = obj_ && obj_->contains(key);
        read(key, text);
        if (present) out = parse(text);
    }

    void finish() {
        if (!obj_) return;
        for (const auto& item : obj_->items()) {
            if (!seen_.count(item.key())) unknown_.push_back(prefix_ + item.key());
        }
    }

private:
    const nlohmann::json* obj_ = nullptr;
    std::string prefix_;
    std::set<std::string> seen_;
    std::vector<std::string>& unknown_;
};

nlohmann::json sites_to_json(const std::set<DropoutSite>& sites) {
    nlohmann::json arr = nlohmann::json::array();
    for (DropoutSite s : sites) arr.push_back(to_string(s));
    return arr;
}

std::set<DropoutSite> sites_from_json(const nlohmann::json& arr) {
    if (!arr.is_array()) throw ConfigError("model.dropout_sites must be an array of site names");
    std::set<DropoutSite> sites;
    for (const auto& v : arr) sites.insert(dropout_site_from_string(v.get<std::string>()));
    return sites;
}

nlohmann::json schedule_to_json(const DropoutSchedule& s) {
    nlohmann::json j{{"kind", to_string(s.kind)}, {"p_base", s.p_base}};
    if (s.uses_direction()) j["direction"] = to_string(s.direction);
    if (s.uses_cutoff()) j["cutoff_iter"] = s.cutoff_iter;
    if (s.uses_cycles()) j["cycles"] = s.cycles;
    return j;
}

} // namespace

nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json j;
    j["model"] = {{"vocab_size", c.model.vocab_size},
                  {"context_len", c.model.context_len},
                  {"d_model", c.model.d_model},
                  {"n_layers", c.model.n_layers},
                  {"n_heads", c.model.n_heads},
                  {"d_ff", c.model.d_ff},
                  {"dropout_sites", sites_to_json(c.model.dropout_sites)},
                  {"tied_head", c.model.tied_head},
                  {"attn_dropout_after_residual", c.model.attn_dropout_after_residual}};
    j["train"] = {{"total_iters", c.train.total_iters},
                  {"batch_size", c.train.batch_size},
                  {"seq_len", c.train.seq_len},
                  {"lr", c.train.lr},
                  {"lr_schedule", to_string(c.train.lr_schedule)},
                  {"warmup_iters", c.train.warmup_iters},
                  {"min_lr_ratio", c.train.min_lr_ratio},
                  {"optimizer", to_string(c.train.optimizer)},
                  {"beta1", c.train.beta1},
                  {"beta2", c.train.beta2},
                  {"eps", c.train.eps},
                  {"weight_decay", c.train.weight_decay},
                  {"momentum", c.train.momentum},
                  {"seed", c.train.seed},
                  {"eval_every", c.train.eval_every},
                  {"eval_batches", c.train.eval_batches},
                  {"checkpoint_every", c.train.checkpoint_every},
                  {"gdv_every", c.train.gdv_every},
                  {"log_wall_time", c.train.log_wall_time}};
    j["schedule"] = schedule_to_json(c.schedule);
    j["data"] = {{"corpus", c.data.corpus},
                 {"val_fraction", c.data.val_fraction},
                 {"sampling", to_string(c.data.sampling)}};
    j["instrumentation"] = {{"gdv_minibatches", c.instrumentation.gdv_minibatches},
                            {"gdv_p", c.instrumentation.gdv_p},
                            {"gdv_batch_size", c.instrumentation.gdv_batch_size},
                            {"gdv_seq_len", c.instrumentation.gdv_seq_len},
                            {"grouping", to_string(c.instrumentation.grouping)},
                            {"include_embedding", c.instrumentation.include_embedding}};
    return j;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config root must be an object");
    static const std::set<std::string> kSections = {"model", "train", "schedule", "data",
                                                    "instrumentation"};
    std::vector<std::string> unknown;
    for (const auto& item : j.items()) {
        if (!kSections.count(item.key())) unknown.push_back(item.key());
    }
    RunConfig c;

    SectionReader model(j, "model", unknown);
    model.read("vocab_size", c.model.vocab_size);
    model.read("context_len", c.model.context_len);
    model.read("d_model", c.model.d_model);
    model.read("n_layers", c.model.n_layers);
    model.read("n_heads", c.model.n_heads);
    model.read("d_ff", c.model.d_ff);
    {
        nlohmann::json sites;
        model.read("dropout_sites", sites);
        if (!sites.is_null()) c.model.dropout_sites = sites_from_json(sites);
    }
    model.read("tied_head", c.model.tied_head);
    model.read("attn_dropout_after_residual", c.model.attn_dropout_after_residual);
    model.finish();

    SectionReader train(j, "train", unknown);
    train.read("total_iters", c.train.total_iters);
    train.read("batch_size", c.train.batch_size);
    train.read("seq_len", c.train.seq_len);
    train.read("lr", c.train.lr);
    train.read_enum("lr_schedule", c.train.lr_schedule, lr_schedule_from_string);
    train.read("warmup_iters", c.train.warmup_iters);
    train.read("min_lr_ratio", c.train.min_lr_ratio);
    train.read_enum("optimizer", c.train.optimizer, optimizer_kind_from_string);
    train.read("beta1", c.train.beta1);
    train.read("beta2", c.train.beta2);
    train.read("eps", c.train.eps);
    train.read("weight_decay", c.train.weight_decay);
    train.read("momentum", c.train.momentum);
    train.read("seed", c.train.seed);
    train.read("eval_every", c.train.eval_every);
    train.read("eval_batches", c.train.eval_batches);
    train.read("checkpoint_every", c.train.checkpoint_every);
    train.read("gdv_every", c.train.gdv_every);
    train.read("log_wall_time", c.train.log_wall_time);
    train.finish();

    SectionReader schedule(j, "schedule", unknown);
    schedule.read_enum("kind", c.schedule.kind, schedule_kind_from_string);
    // The annealed curriculum spans the full unit range by definition.
    if (c.schedule.kind == ScheduleKind::annealed_deterministic) c.schedule.p_base = 1.0;
    schedule.read("p_base", c.schedule.p_base);
    schedule.read_enum("direction", c.schedule.direction, schedule_direction_from_string);
    schedule.read("cutoff_iter", c.schedule.cutoff_iter);
    schedule.read("cycles", c.schedule.cycles);
    schedule.finish();

    SectionReader data(j, "data", unknown);
    data.read("corpus", c.data.corpus);
    data.read("val_fraction", c.data.val_fraction);
    data.read_enum("sampling", c.data.sampling, sampling_from_string);
    data.finish();

    SectionReader instr(j, "instrumentation", unknown);
    instr.read("gdv_minibatches", c.instrumentation.gdv_minibatches);
    instr.read("gdv_p", c.instrumentation.gdv_p);
    instr.read("gdv_batch_size", c.instrumentation.gdv_batch_size);
    instr.read("gdv_seq_len", c.instrumentation.gdv_seq_len);
    instr.read_enum("grouping", c.instrumentation.grouping, gdv_grouping_from_string);
    instr.read("include_embedding", c.instrumentation.include_embedding);
    instr.finish();

    if (!unknown.empty()) {
        std::string msg = "unknown config keys:";
        for (const auto& k : unknown) msg += " " + k;
        throw ConfigError(msg);
    }
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open '" + path.string() + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config: parse error in '" + path.string() + "': " + e.what());
    }
    return run_config_from_json(j);
}

void save_run_config(const RunConfig& config, const std::filesystem::path& path) {
    std::error_code ec;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("config: cannot open '" + path.string() + "' for writing");
    out << to_json(config).dump(2) << '\n';
    out.flush();
    if (!out) throw IoError("config: write to '" + path.string() + "' failed");
}

uint64_t config_hash(const RunConfig& config) { return fnv1a64(to_json(config).dump()); }

namespace {

void diff_walk(const std::string& path, const nlohmann::json& a, const nlohmann::json& b,
               std::vector<std::string>& out) {
    if (a == b) return;
    if (a.is_object() && b.is_object()) {
        std::set<std::string> keys;
        for (const auto& item : a.items()) keys.insert(item.key());
        for (const auto& item : b.items()) keys.insert(item.key());
        for (const auto& key : keys) {
            const std::string sub = path.empty() ? key : path + "." + key;
            const nlohmann::json& av = a.contains(key) ? a.at(key) : nlohmann::json();
            const nlohmann::json& bv = b.contains(key) ? b.at(key) : nlohmann::json();
            diff_walk(sub, av, bv, out);
        }
        return;
    }
    out.push_back(path + ": " + a.dump() + " vs " + b.dump());
}

} // namespace

std::vector<std::string> config_diff(const nlohmann::json& a, const nlohmann::json& b) {
    std::vector<std::string> out;
    diff_walk("", a, b, out);
    return out;
}

std::string config_keys_help() {
    const nlohmann::json defaults = to_json(RunConfig{});
    std::string out = "Config file keys (JSON, sections model/train/schedule/data/instrumentation):\n";
    for (const auto& section : defaults.items()) {
        for (const auto& kv : section.value().items()) {
            out += "  " + section.key() + "." + kv.key() + " (default: " + kv.value().dump() +
                   ")\n";
        }
    }
    out += "  schedule.direction, schedule.cutoff_iter, schedule.cycles apply to the kinds that "
           "use them\n";
    return out;
}

// ---------------------------------------------------------------------------
// Experiment matrix
// ---------------------------------------------------------------------------

ExperimentMatrix load_matrix(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("matrix: cannot open '" + path.string() + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("matrix: parse error in '" + path.string() + "': " + e.what());
    }
    if (!j.is_object()) throw ConfigError("matrix: root must be an object");
    for (const auto& item : j.items()) {
        if (item.key() != "base" && item.key() != "cells") {
            throw ConfigError("matrix: unknown key '" + item.key() + "'");
        }
    }
    if (!j.contains("base")) throw ConfigError("matrix: missing 'base'");
    if (!j.contains("cells") || !j.at("cells").is_array() || j.at("cells").empty()) {
        throw ConfigError("matrix: 'cells' must be a non-empty array");
    }

    ExperimentMatrix matrix;
    const auto& base = j.at("base");
    if (base.is_string()) {
        std::filesystem::path base_path = base.get<std::string>();
        if (base_path.is_relative()) base_path = path.parent_path() / base_path;
        matrix.base = load_run_config(base_path);
    } else if (base.is_object()) {
        matrix.base = run_config_from_json(base);
    } else {
        throw ConfigError("matrix: 'base' must be a config object or a path string");
    }

    std::set<std::string> names;
    for (const auto& cell_json : j.at("cells")) {
        if (!cell_json.is_object()) throw ConfigError("matrix: each cell must be an object");
        for (const auto& item : cell_json.items()) {
            if (item.key() != "name" && item.key() != "schedule" && item.key() != "seeds") {
                throw ConfigError("matrix: unknown cell key '" + item.key() + "'");
            }
        }
        MatrixCell cell;
        if (!cell_json.contains("name") || !cell_json.at("name").is_string()) {
            throw ConfigError("matrix: every cell needs a string 'name'");
        }
        cell.name = cell_json.at("name").get<std::string>();
        if (cell.name.empty()) throw ConfigError("matrix: cell names must be non-empty");
        if (!names.insert(cell.name).second) {
            throw ConfigError("matrix: duplicate cell name '" + cell.name + "'");
        }
        if (cell_json.contains("schedule")) {
            if (!cell_json.at("schedule").is_object()) {
                throw ConfigError("matrix: cell '" + cell.name + "' schedule must be an object");
            }
            cell.schedule_overrides = cell_json.at("schedule");
        } else {
            cell.schedule_overrides = nlohmann::json::object();
        }
        if (cell_json.contains("seeds")) {
            if (!cell_json.at("seeds").is_array() || cell_json.at("seeds").empty()) {
                throw ConfigError("matrix: cell '" + cell.name + "' seeds must be non-empty");
            }
            for (const auto& s : cell_json.at("seeds")) cell.seeds.push_back(s.get<uint64_t>());
        } else {
            cell.seeds.push_back(matrix.base.train.seed);
        }
        matrix.cells.push_back(std::move(cell));
    }
    return matrix;
}

std::vector<ExperimentMatrix::Expanded> ExperimentMatrix::expand() const {
    std::vector<Expanded> out;
    nlohmann::json base_json = to_json(base);
    for (const auto& cell : cells) {
        for (uint64_t seed : cell.seeds) {
            nlohmann::json cfg_json = base_json;
            // Key-by-key override keeps untouched schedule fields from the base.
            nlohmann::json sched = cfg_json["schedule"];
            sched.update(cell.schedule_overrides);
            cfg_json["schedule"] = sched;
            RunConfig cfg = run_config_from_json(cfg_json);
            cfg.train.seed = seed;
            cfg.bind_and_validate();
            Expanded e;
            e.run_name = cell.name + "-seed" + std::to_string(seed);
            e.cell_name = cell.name;
            e.seed = seed;
            e.config = std::move(cfg);
            out.push_back(std::move(e));
        }
    }
    return out;
}

} // namespace droplab
