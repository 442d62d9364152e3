#include "echotune/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "echotune/error.hpp"

namespace echotune {

namespace {

constexpr char kMagic[8] = {'E', 'T', 'C', 'K', 'P', 'T', '0', '1'};

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<uint8_t>& out, double v) { put_u64(out, std::bit_cast<uint64_t>(v)); }

struct Cursor {
    const std::vector<uint8_t>& buf;
    size_t pos = 0;

    void need(size_t n, const char* what) const {
        if (pos + n > buf.size()) {
            throw CheckpointError(std::string("truncated checkpoint: needed ") + std::to_string(n) +
                                  " bytes for " + what + " at offset " + std::to_string(pos) +
                                  ", file has " + std::to_string(buf.size()));
        }
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64(const char* what) {
        need(8, what);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
};

} // namespace

uint64_t fnv1a64_bytes(const uint8_t* data, size_t n) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

const NamedTensor* Checkpoint::find(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return &t;
    }
    return nullptr;
}

int64_t Checkpoint::total_values() const {
    int64_t n = 0;
    for (const auto& t : tensors) n += static_cast<int64_t>(t.values.size());
    return n;
}

std::vector<uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
    std::vector<uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 8);
    put_u32(out, ckpt.version);
    put_u64(out, ckpt.config_hash);
    put_u32(out, static_cast<uint32_t>(ckpt.tensors.size()));
    for (const auto& t : ckpt.tensors) {
        put_u32(out, static_cast<uint32_t>(t.name.size()));
        out.insert(out.end(), t.name.begin(), t.name.end());
        put_u32(out, static_cast<uint32_t>(t.shape.size()));
        int64_t numel = 1;
        for (int d : t.shape) {
            put_u64(out, static_cast<uint64_t>(d));
            numel *= d;
        }
        if (numel != static_cast<int64_t>(t.values.size())) {
            throw CheckpointError("tensor '" + t.name + "' shape/value mismatch");
        }
        for (double v : t.values) put_f64(out, v);
    }
    put_u64(out, fnv1a64_bytes(out.data(), out.size()));
    return out;
}

Checkpoint deserialize_checkpoint(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 8 + 4 + 8 + 4 + 8) {
        throw CheckpointError("truncated checkpoint: file of " + std::to_string(bytes.size()) +
                              " bytes is below the minimum header size");
    }
    const uint64_t stored = [&] {
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(bytes[bytes.size() - 8 + i]) << (8 * i);
        return v;
    }();
    const uint64_t computed = fnv1a64_bytes(bytes.data(), bytes.size() - 8);
    if (stored != computed) {
        throw CheckpointError("checksum mismatch at offset " + std::to_string(bytes.size() - 8) +
                              " (stored " + std::to_string(stored) + ", computed " +
                              std::to_string(computed) + ")");
    }

    Cursor c{bytes};
    c.need(8, "magic");
    if (std::memcmp(bytes.data(), kMagic, 8) != 0) {
        throw CheckpointError("bad magic at offset 0");
    }
    c.pos = 8;
    Checkpoint ckpt;
    ckpt.version = c.u32("version");
    if (ckpt.version != 1) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(ckpt.version));
    }
    ckpt.config_hash = c.u64("config hash");
    const uint32_t count = c.u32("tensor count");
    ckpt.tensors.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        const uint32_t name_len = c.u32("name length");
        c.need(name_len, "tensor name");
        t.name.assign(reinterpret_cast<const char*>(bytes.data() + c.pos), name_len);
        c.pos += name_len;
        const uint32_t ndim = c.u32("rank");
        int64_t numel = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            const uint64_t dim = c.u64("dimension");
            t.shape.push_back(static_cast<int>(dim));
            numel *= static_cast<int64_t>(dim);
        }
        if (numel < 0 || static_cast<uint64_t>(numel) * 8 > bytes.size()) {
            throw CheckpointError("implausible tensor size for '" + t.name + "'");
        }
        t.values.reserve(static_cast<size_t>(numel));
        for (int64_t v = 0; v < numel; ++v) t.values.push_back(c.f64("tensor values"));
        ckpt.tensors.push_back(std::move(t));
    }
    if (c.pos != bytes.size() - 8) {
        throw CheckpointError("trailing bytes after tensor directory at offset " + std::to_string(c.pos));
    }
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const std::vector<uint8_t> bytes = serialize_checkpoint(ckpt);
    // Write to a temp file first so an interrupt never leaves a torn file
    // under the final name.
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open '" + tmp.string() + "' for writing");
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw IoError("short write to '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw IoError("cannot open checkpoint '" + path.string() + "'");
    const std::streamsize size = f.tellg();
    f.seekg(0);
    std::vector<uint8_t> bytes(static_cast<size_t>(size));
    f.read(reinterpret_cast<char*>(bytes.data()), size);
    if (!f) throw IoError("short read from '" + path.string() + "'");
    return deserialize_checkpoint(bytes);
}

} // namespace echotune
