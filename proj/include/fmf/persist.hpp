#pragma once

#include <cstdio>
#include <map>
#include <string>

#include "fmf/common.hpp"

namespace fmf {

// Ordered key=value text block used for resolved run configs and the
// checkpoint config section. Order is preserved so serialized bytes are
// deterministic.
using KvList = std::vector<std::pair<std::string, std::string>>;

inline std::string kv_serialize(const KvList& kv) {
    std::string out;
    for (const auto& [k, v] : kv) {
        out += k;
        out += '=';
        out += v;
        out += '\n';
    }
    return out;
}

inline KvList kv_parse(const std::string& text) {
    KvList kv;
    size_t pos = 0;
    while (pos < text.size()) {
        size_t eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        std::string line = text.substr(pos, eol - pos);
        pos = eol + 1;
        if (line.empty() || line[0] == '#') continue;
        size_t eq = line.find('=');
        FMF_CHECK(eq != std::string::npos, "malformed key=value line: " << line);
        kv.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    return kv;
}

inline const std::string* kv_find(const KvList& kv, const std::string& key) {
    for (const auto& [k, v] : kv)
        if (k == key) return &v;
    return nullptr;
}

struct CheckpointRecord {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

namespace detail_io {

struct File {
    std::FILE* f = nullptr;
    explicit File(const std::string& path, const char* mode) : f(std::fopen(path.c_str(), mode)) {
        FMF_CHECK(f, "cannot open " << path);
    }
    ~File() {
        if (f) std::fclose(f);
    }
    File(const File&) = delete;
};

inline void write_bytes(std::FILE* f, const void* p, size_t n) {
    FMF_CHECK(std::fwrite(p, 1, n, f) == n, "short write");
}
inline void read_bytes(std::FILE* f, void* p, size_t n) {
    FMF_CHECK(std::fread(p, 1, n, f) == n, "short read / truncated file");
}
inline void write_u32(std::FILE* f, uint32_t v) { write_bytes(f, &v, 4); }
inline uint32_t read_u32(std::FILE* f) {
    uint32_t v;
    read_bytes(f, &v, 4);
    return v;
}

}  // namespace detail_io

inline constexpr uint32_t kCheckpointVersion = 1;

// Checkpoint layout: magic "FMCK", version u32, config length u32 + bytes
// (flat key=value text), record count u32, then per record: name length u32,
// name bytes, rank u32, extents u32 each, little-endian f32 payload.
inline void write_checkpoint(const std::string& path, const KvList& config,
                             const std::vector<CheckpointRecord>& records) {
    ensure_little_endian();
    detail_io::File out(path, "wb");
    detail_io::write_bytes(out.f, "FMCK", 4);
    detail_io::write_u32(out.f, kCheckpointVersion);
    std::string cfg = kv_serialize(config);
    detail_io::write_u32(out.f, uint32_t(cfg.size()));
    detail_io::write_bytes(out.f, cfg.data(), cfg.size());
    detail_io::write_u32(out.f, uint32_t(records.size()));
    for (const auto& r : records) {
        detail_io::write_u32(out.f, uint32_t(r.name.size()));
        detail_io::write_bytes(out.f, r.name.data(), r.name.size());
        detail_io::write_u32(out.f, uint32_t(r.shape.size()));
        for (int64_t e : r.shape) detail_io::write_u32(out.f, uint32_t(e));
        detail_io::write_bytes(out.f, r.data.data(), r.data.size() * 4);
    }
}

inline void read_checkpoint(const std::string& path, KvList& config,
                            std::vector<CheckpointRecord>& records) {
    ensure_little_endian();
    detail_io::File in(path, "rb");
    char magic[4];
    detail_io::read_bytes(in.f, magic, 4);
    FMF_CHECK(std::memcmp(magic, "FMCK", 4) == 0, path << " is not a checkpoint file");
    uint32_t version = detail_io::read_u32(in.f);
    FMF_CHECK(version == kCheckpointVersion, "unsupported checkpoint version " << version);
    uint32_t cfg_len = detail_io::read_u32(in.f);
    std::string cfg(cfg_len, '\0');
    detail_io::read_bytes(in.f, cfg.data(), cfg_len);
    config = kv_parse(cfg);
    uint32_t count = detail_io::read_u32(in.f);
    records.clear();
    records.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        CheckpointRecord r;
        uint32_t name_len = detail_io::read_u32(in.f);
        r.name.resize(name_len);
        detail_io::read_bytes(in.f, r.name.data(), name_len);
        uint32_t rank = detail_io::read_u32(in.f);
        r.shape.resize(rank);
        int64_t n = 1;
        for (uint32_t k = 0; k < rank; ++k) {
            r.shape[k] = detail_io::read_u32(in.f);
            n *= r.shape[k];
        }
        r.data.resize(size_t(n));
        detail_io::read_bytes(in.f, r.data.data(), size_t(n) * 4);
        records.push_back(std::move(r));
    }
}

// FNV-1a over a file's bytes; used by determinism checks and the CLI.
inline uint64_t file_hash(const std::string& path) {
    detail_io::File in(path, "rb");
    uint64_t h = 0xcbf29ce484222325ULL;
    unsigned char buf[4096];
    size_t n;
    while ((n = std::fread(buf, 1, sizeof buf, in.f)) > 0)
        for (size_t i = 0; i < n; ++i) h = (h ^ buf[i]) * 1099511628211ULL;
    return h;
}

}  // namespace fmf
