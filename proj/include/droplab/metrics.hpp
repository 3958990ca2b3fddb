#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

namespace droplab {

// One training-step or eval observation, appended to the run's JSONL stream.
struct MetricsRecord {
    int64_t step = 0;
    std::string split; // "train" | "val"
    double loss = 0.0;
    double ppl = 0.0;
    double p = 0.0;
    double lr = 0.0;
    int64_t wall_ms = 0;
};

nlohmann::json to_json(const MetricsRecord& record);
MetricsRecord metrics_record_from_json(const nlohmann::json& j);

class JsonlWriter {
public:
    explicit JsonlWriter(const std::filesystem::path& path, bool append = false);
    void write(const nlohmann::json& value); // one line, flushed
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
    std::ofstream out_;
};

std::vector<MetricsRecord> read_metrics_jsonl(const std::filesystem::path& path);

// Companion CSV with the same records and columns.
void metrics_jsonl_to_csv(const std::filesystem::path& jsonl_path,
                          const std::filesystem::path& csv_path);

// Shortest round-trip decimal text for a double, identical to its JSON form.
std::string number_repr(double value);

} // namespace droplab
