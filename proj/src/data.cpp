#include "droplab/data.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "droplab/hash.hpp"

namespace droplab {

std::vector<uint16_t> tokenize(std::string_view text) {
    std::vector<uint16_t> out;
    out.reserve(text.size());
    for (unsigned char c : text) out.push_back(static_cast<uint16_t>(c));
    return out;
}

std::string detokenize(std::span<const uint16_t> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (uint16_t t : tokens) {
        if (t < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    }
    return out;
}

namespace {

void check_val_fraction(double val_fraction) {
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
        throw ConfigError("data.val_fraction must lie in (0, 1), got " +
                          std::to_string(val_fraction));
    }
}

int64_t split_point(int64_t n, double val_fraction) {
    return static_cast<int64_t>(static_cast<double>(n) * (1.0 - val_fraction));
}

} // namespace

Corpus Corpus::from_text(std::string name, std::string_view text, double val_fraction) {
    check_val_fraction(val_fraction);
    Corpus corpus;
    corpus.name = std::move(name);
    corpus.tokens = tokenize(text);
    corpus.content_hash = fnv1a64(text);
    corpus.train_end = split_point(corpus.size(), val_fraction);
    return corpus;
}

Corpus Corpus::from_text_dir(const std::filesystem::path& dir, double val_fraction) {
    check_val_fraction(val_fraction);
    if (!std::filesystem::is_directory(dir)) {
        throw IoError("corpus: '" + dir.string() + "' is not a directory");
    }
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_regular_file()) files.push_back(entry.path());
    }
    if (files.empty()) throw DataError("corpus: no files found in '" + dir.string() + "'");
    std::sort(files.begin(), files.end());

    Corpus corpus;
    corpus.name = dir.filename().string();
    uint64_t h = fnv1a64("");
    for (const auto& file : files) {
        std::ifstream in(file, std::ios::binary);
        if (!in) throw IoError("corpus: cannot read '" + file.string() + "'");
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        h ^= fnv1a64(file.filename().string()) * 0x100000001b3ull;
        h ^= fnv1a64(text);
        auto toks = tokenize(text);
        corpus.tokens.insert(corpus.tokens.end(), toks.begin(), toks.end());
        corpus.tokens.push_back(static_cast<uint16_t>(kEosToken));
    }
    corpus.content_hash = h;
    corpus.train_end = split_point(corpus.size(), val_fraction);
    return corpus;
}

namespace {

constexpr char kCacheMagic[4] = {'D', 'L', 'C', 'P'};
constexpr uint32_t kCacheVersion = 1;

template <class T>
void write_pod(std::ostream& out, const T& value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T read_pod(std::istream& in, const char* what) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) throw IoError(std::string("corpus cache: truncated while reading ") + what);
    return value;
}

} // namespace

void Corpus::save_cache(const std::filesystem::path& path) const {
    std::error_code ec;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("corpus cache: cannot open '" + path.string() + "' for writing");
    out.write(kCacheMagic, 4);
    write_pod(out, kCacheVersion);
    write_pod<uint32_t>(out, static_cast<uint32_t>(kVocabSize));
    write_pod<uint64_t>(out, content_hash);
    write_pod<uint32_t>(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<uint64_t>(out, static_cast<uint64_t>(tokens.size()));
    out.write(reinterpret_cast<const char*>(tokens.data()),
              static_cast<std::streamsize>(tokens.size() * sizeof(uint16_t)));
    out.flush();
    if (!out) throw IoError("corpus cache: write to '" + path.string() + "' failed");
}

Corpus Corpus::load_cache(const std::filesystem::path& path, double val_fraction) {
    check_val_fraction(val_fraction);
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("corpus cache: cannot open '" + path.string() + "'");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kCacheMagic, 4) != 0) {
        throw IoError("corpus cache: '" + path.string() + "' is not a droplab corpus (bad magic)");
    }
    const auto version = read_pod<uint32_t>(in, "version");
    if (version != kCacheVersion) {
        throw IoError("corpus cache: unsupported version " + std::to_string(version));
    }
    const auto vocab = read_pod<uint32_t>(in, "vocab");
    if (vocab != static_cast<uint32_t>(kVocabSize)) {
        throw IoError("corpus cache: vocabulary " + std::to_string(vocab) + " not supported");
    }
    Corpus corpus;
    corpus.content_hash = read_pod<uint64_t>(in, "hash");
    const auto name_len = read_pod<uint32_t>(in, "name length");
    corpus.name.resize(name_len);
    in.read(corpus.name.data(), name_len);
    const auto count = read_pod<uint64_t>(in, "token count");
    corpus.tokens.resize(count);
    in.read(reinterpret_cast<char*>(corpus.tokens.data()),
            static_cast<std::streamsize>(count * sizeof(uint16_t)));
    if (!in) throw IoError("corpus cache: truncated token array");
    corpus.train_end = split_point(corpus.size(), val_fraction);
    return corpus;
}

std::string to_string(Sampling sampling) {
    return sampling == Sampling::random_offset ? "random_offset" : "sequential_chunks";
}

Sampling sampling_from_string(const std::string& name) {
    if (name == "random_offset") return Sampling::random_offset;
    if (name == "sequential_chunks") return Sampling::sequential_chunks;
    throw ConfigError("data.sampling: unknown sampling '" + name + "'");
}

Batch batch_from_offsets(const Corpus& corpus, std::span<const int64_t> offsets, int64_t seq) {
    if (seq <= 0) throw DomainError("batch: seq must be positive");
    Batch batch;
    batch.batch = static_cast<int64_t>(offsets.size());
    batch.seq = seq;
    batch.inputs.resize(offsets.size() * static_cast<size_t>(seq));
    batch.targets.resize(offsets.size() * static_cast<size_t>(seq));
    for (size_t b = 0; b < offsets.size(); ++b) {
        const int64_t off = offsets[b];
        if (off < 0 || off + seq + 1 > corpus.size()) {
            throw DataError("batch: offset " + std::to_string(off) + " leaves no room for " +
                            std::to_string(seq) + "+1 tokens");
        }
        for (int64_t i = 0; i < seq; ++i) {
            batch.inputs[b * static_cast<size_t>(seq) + static_cast<size_t>(i)] =
                static_cast<int32_t>(corpus.tokens[static_cast<size_t>(off + i)]);
            batch.targets[b * static_cast<size_t>(seq) + static_cast<size_t>(i)] =
                static_cast<int32_t>(corpus.tokens[static_cast<size_t>(off + i + 1)]);
        }
    }
    return batch;
}

Batch make_batches(const Corpus& corpus, const BatchPlan& plan, int64_t step, Split split) {
    if (plan.batch_size <= 0) throw ConfigError("batch plan: batch_size must be positive");
    if (plan.context_len <= 0) throw ConfigError("batch plan: context_len must be positive");
    const int64_t seq = plan.context_len;
    const int64_t lo = split == Split::train ? 0 : corpus.train_end;
    const int64_t hi_end = split == Split::train ? corpus.train_end : corpus.size();
    const int64_t span = hi_end - lo;
    // A row needs seq inputs plus one shifted target.
    const int64_t positions = span - seq - 1 + 1;
    if (positions < 1) {
        throw DataError("corpus too small: split '" +
                        std::string(split == Split::train ? "train" : "validation") + "' has " +
                        std::to_string(span) + " tokens but sequences of " + std::to_string(seq) +
                        " need at least " + std::to_string(seq + 1));
    }
    std::vector<int64_t> offsets(static_cast<size_t>(plan.batch_size));
    if (plan.sampling == Sampling::random_offset) {
        Rng rng = Rng(plan.seed)
                      .derive(plan.purpose)
                      .derive(split == Split::train ? 0 : 1)
                      .derive(static_cast<uint64_t>(step));
        for (auto& off : offsets) {
            off = lo + static_cast<int64_t>(rng.below(static_cast<uint64_t>(positions)));
        }
    } else {
        for (int64_t b = 0; b < plan.batch_size; ++b) {
            const int64_t chunk = step * plan.batch_size + b;
            offsets[static_cast<size_t>(b)] = lo + (chunk * seq) % positions;
        }
    }
    return batch_from_offsets(corpus, offsets, seq);
}

// ---------------------------------------------------------------------------
// Synthetic corpus text
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kNouns[] = {
    "time", "year", "people", "way", "day", "man", "thing", "woman", "life", "child", "world",
    "school", "state", "family", "student", "group", "country", "problem", "hand", "part",
    "place", "case", "week", "company", "system", "program", "question", "work", "government",
    "number", "night", "point", "home", "water", "room", "mother", "area", "money", "story",
    "fact", "month", "lot", "right", "study", "book", "eye", "job", "word", "business", "issue",
    "side", "kind", "head", "house", "service", "friend", "father", "power", "hour", "game",
    "line", "end", "member", "law", "car", "city", "community", "name", "president", "team",
    "minute", "idea", "kid", "body", "information", "back", "parent", "face", "others", "level",
    "office", "door", "health", "person", "art", "war", "history", "party", "result", "change",
    "morning", "reason", "research", "girl", "guy", "moment", "air", "teacher", "force",
    "education", "river", "mountain", "forest", "village", "stone", "garden", "winter", "summer",
    "light", "shadow", "road", "bridge", "letter", "voice", "music", "season", "harvest", "market",
};

constexpr const char* kVerbs[] = {
    "said", "made", "went", "took", "came", "saw", "knew", "got", "gave", "found", "thought",
    "told", "became", "showed", "left", "felt", "put", "brought", "began", "kept", "held",
    "wrote", "stood", "heard", "let", "meant", "set", "met", "ran", "paid", "sat", "spoke",
    "lay", "led", "read", "grew", "lost", "fell", "sent", "built", "understood", "drew",
    "broke", "spent", "carried", "raised", "passed", "sold", "required", "reported", "decided",
    "pulled", "returned", "explained", "hoped", "developed", "appeared", "watched", "followed",
    "stopped", "created", "opened", "walked", "offered", "remembered", "considered", "waited",
};

constexpr const char* kAdjectives[] = {
    "good", "new", "first", "last", "long", "great", "little", "own", "other", "old", "right",
    "big", "high", "different", "small", "large", "next", "early", "young", "important", "few",
    "public", "bad", "same", "able", "recent", "certain", "whole", "free", "full", "local",
    "late", "hard", "major", "better", "strong", "possible", "entire", "quiet", "bright",
    "ancient", "gentle", "distant", "narrow", "broad", "silent", "golden", "heavy", "simple",
    "common", "serious", "ready", "clear", "deep", "warm", "cold", "dark", "rare", "familiar",
};

constexpr const char* kAdverbs[] = {
    "quickly", "slowly", "carefully", "quietly", "suddenly", "finally", "usually", "often",
    "always", "never", "sometimes", "again", "already", "soon", "together", "eventually",
    "rarely", "gently", "nearly", "almost", "certainly", "probably", "clearly", "simply",
};

constexpr const char* kPrepositions[] = {
    "of", "in", "on", "at", "by", "for", "with", "about", "against", "between", "into",
    "through", "during", "before", "after", "above", "below", "under", "around", "near",
};

constexpr const char* kConnectives[] = {
    "and", "but", "because", "while", "although", "so", "when", "until", "since", "as",
};

template <size_t N>
const char* pick(const char* const (&words)[N], Rng& rng) {
    // Squared uniform biases toward the front of the list, Zipf-like.
    const double u = rng.uniform();
    const auto idx = static_cast<size_t>(u * u * static_cast<double>(N));
    return words[std::min(idx, N - 1)];
}

void append_noun_phrase(std::string& out, Rng& rng, bool capitalize) {
    const char* article = rng.uniform() < 0.7 ? "the" : "a";
    out += article;
    if (capitalize) out[out.size() - std::strlen(article)] &= ~0x20;
    out += ' ';
    if (rng.uniform() < 0.45) {
        out += pick(kAdjectives, rng);
        out += ' ';
    }
    out += pick(kNouns, rng);
}

void append_clause(std::string& out, Rng& rng, bool capitalize) {
    append_noun_phrase(out, rng, capitalize);
    out += ' ';
    out += pick(kVerbs, rng);
    out += ' ';
    append_noun_phrase(out, rng, false);
    if (rng.uniform() < 0.5) {
        out += ' ';
        out += pick(kPrepositions, rng);
        out += ' ';
        append_noun_phrase(out, rng, false);
    }
    if (rng.uniform() < 0.25) {
        out += ' ';
        out += pick(kAdverbs, rng);
    }
}

} // namespace

std::string synth_text(uint64_t seed, size_t approx_bytes) {
    Rng rng(seed, streams::kSynthText);
    std::string out;
    out.reserve(approx_bytes + 256);
    while (out.size() < approx_bytes) {
        const int sentences = 3 + static_cast<int>(rng.below(5));
        for (int s = 0; s < sentences && out.size() < approx_bytes; ++s) {
            append_clause(out, rng, true);
            while (rng.uniform() < 0.3) {
                out += rng.uniform() < 0.5 ? ", " : " ";
                out += pick(kConnectives, rng);
                out += ' ';
                append_clause(out, rng, false);
            }
            out += ". ";
        }
        out += "\n\n";
    }
    return out;
}

} // namespace droplab
