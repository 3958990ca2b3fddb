#include "droplab/metrics.hpp"

#include "droplab/error.hpp"

namespace droplab {

nlohmann::json to_json(const MetricsRecord& r) {
    return nlohmann::json{{"step", r.step}, {"split", r.split}, {"loss", r.loss},
                          {"ppl", r.ppl},   {"p", r.p},         {"lr", r.lr},
                          {"wall_ms", r.wall_ms}};
}

MetricsRecord metrics_record_from_json(const nlohmann::json& j) {
    MetricsRecord r;
    r.step = j.at("step").get<int64_t>();
    r.split = j.at("split").get<std::string>();
    r.loss = j.at("loss").get<double>();
    r.ppl = j.at("ppl").get<double>();
    r.p = j.at("p").get<double>();
    r.lr = j.at("lr").get<double>();
    r.wall_ms = j.at("wall_ms").get<int64_t>();
    return r;
}

JsonlWriter::JsonlWriter(const std::filesystem::path& path, bool append) : path_(path) {
    std::error_code ec;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
    out_.open(path, append ? (std::ios::out | std::ios::app) : (std::ios::out | std::ios::trunc));
    if (!out_) throw IoError("metrics: cannot open '" + path.string() + "' for writing");
}

void JsonlWriter::write(const nlohmann::json& value) {
    out_ << value.dump() << '\n';
    out_.flush();
    if (!out_) throw IoError("metrics: write to '" + path_.string() + "' failed");
}

std::vector<MetricsRecord> read_metrics_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("metrics: cannot open '" + path.string() + "'");
    std::vector<MetricsRecord> records;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            records.push_back(metrics_record_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw DataError("metrics: bad record at " + path.string() + ":" +
                            std::to_string(lineno) + ": " + e.what());
        }
    }
    return records;
}

std::string number_repr(double value) { return nlohmann::json(value).dump(); }

void metrics_jsonl_to_csv(const std::filesystem::path& jsonl_path,
                          const std::filesystem::path& csv_path) {
    const auto records = read_metrics_jsonl(jsonl_path);
    std::ofstream out(csv_path, std::ios::trunc);
    if (!out) throw IoError("metrics: cannot open '" + csv_path.string() + "' for writing");
    out << "step,split,loss,ppl,p,lr,wall_ms\n";
    for (const auto& r : records) {
        out << r.step << ',' << r.split << ',' << number_repr(r.loss) << ',' << number_repr(r.ppl)
            << ',' << number_repr(r.p) << ',' << number_repr(r.lr) << ',' << r.wall_ms << '\n';
    }
    out.flush();
    if (!out) throw IoError("metrics: write to '" + csv_path.string() + "' failed");
}

} // namespace droplab
