#include "droplab/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "droplab/error.hpp"
#include "droplab/hash.hpp"

namespace droplab {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

std::string hash_hex(uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

namespace {

constexpr char kMagic[4] = {'D', 'L', 'A', 'B'};
constexpr uint32_t kVersion = 1;

template <class T>
void write_pod(std::ostream& out, const T& value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T read_pod(std::istream& in, const char* what) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) throw IoError(std::string("checkpoint: truncated while reading ") + what);
    return value;
}

} // namespace

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta,
                     const std::vector<NamedTensor>& tensors) {
    std::error_code ec;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("checkpoint: cannot open '" + path.string() + "' for writing");

    out.write(kMagic, 4);
    write_pod(out, kVersion);
    const std::string meta_text = meta.dump();
    write_pod<uint64_t>(out, meta_text.size());
    out.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));

    write_pod<uint32_t>(out, static_cast<uint32_t>(tensors.size()));
    uint64_t offset = 0;
    for (const auto& nt : tensors) {
        write_pod<uint32_t>(out, static_cast<uint32_t>(nt.name.size()));
        out.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
        const Shape& shape = nt.tensor.shape();
        write_pod<uint32_t>(out, static_cast<uint32_t>(shape.size()));
        for (int64_t d : shape) write_pod<int64_t>(out, d);
        write_pod<uint64_t>(out, offset);
        offset += static_cast<uint64_t>(nt.tensor.numel()) * sizeof(double);
    }
    write_pod<uint64_t>(out, offset);
    for (const auto& nt : tensors) {
        const auto data = nt.tensor.data();
        out.write(reinterpret_cast<const char*>(data.data()),
                  static_cast<std::streamsize>(data.size() * sizeof(double)));
    }
    out.flush();
    if (!out) throw IoError("checkpoint: write to '" + path.string() + "' failed");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint: cannot open '" + path.string() + "'");

    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) {
        throw IoError("checkpoint: '" + path.string() + "' is not a droplab checkpoint (bad magic)");
    }
    const auto version = read_pod<uint32_t>(in, "version");
    if (version != kVersion) {
        throw IoError("checkpoint: unsupported format version " + std::to_string(version));
    }
    const auto meta_len = read_pod<uint64_t>(in, "meta length");
    std::string meta_text(meta_len, '\0');
    in.read(meta_text.data(), static_cast<std::streamsize>(meta_len));
    if (!in) throw IoError("checkpoint: truncated meta block");

    Checkpoint ckpt;
    try {
        ckpt.meta = nlohmann::json::parse(meta_text);
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError(std::string("checkpoint: corrupt meta JSON: ") + e.what());
    }

    struct Entry {
        std::string name;
        Shape shape;
        uint64_t offset;
    };
    const auto count = read_pod<uint32_t>(in, "tensor count");
    std::vector<Entry> entries;
    entries.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        Entry e;
        const auto name_len = read_pod<uint32_t>(in, "name length");
        e.name.resize(name_len);
        in.read(e.name.data(), name_len);
        if (!in) throw IoError("checkpoint: truncated manifest");
        const auto ndim = read_pod<uint32_t>(in, "rank");
        e.shape.resize(ndim);
        for (uint32_t d = 0; d < ndim; ++d) e.shape[d] = read_pod<int64_t>(in, "dim");
        e.offset = read_pod<uint64_t>(in, "offset");
        entries.push_back(std::move(e));
    }
    const auto data_size = read_pod<uint64_t>(in, "data size");
    std::vector<char> blob(data_size);
    in.read(blob.data(), static_cast<std::streamsize>(data_size));
    if (!in) throw IoError("checkpoint: truncated data section");

    for (auto& e : entries) {
        const int64_t numel = shape_numel(e.shape);
        const uint64_t bytes = static_cast<uint64_t>(numel) * sizeof(double);
        if (e.offset + bytes > data_size) {
            throw IoError("checkpoint: manifest entry '" + e.name + "' exceeds data section");
        }
        std::vector<double> values(static_cast<size_t>(numel));
        std::memcpy(values.data(), blob.data() + e.offset, bytes);
        ckpt.tensors.push_back({std::move(e.name), Tensor::from_vector(e.shape, std::move(values))});
    }
    return ckpt;
}

} // namespace droplab
