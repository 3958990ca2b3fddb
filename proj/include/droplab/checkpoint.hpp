#pragma once

#include <filesystem>
#include <vector>

#include <json.hpp>

#include "droplab/model.hpp"

namespace droplab {

// Versioned binary checkpoint: magic "DLAB", a format version, a canonical
// JSON meta blob (config plus trainer state), a manifest of (name, shape,
// offset) entries, then the raw little-endian f64 arrays. Round-trips are
// byte-exact.
struct Checkpoint {
    nlohmann::json meta;
    std::vector<NamedTensor> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta,
                     const std::vector<NamedTensor>& tensors);

Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace droplab
