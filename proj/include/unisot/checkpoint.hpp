#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace unisot {

enum class CheckpointFault { bad_magic, bad_version, truncated, io };

struct checkpoint_error : std::runtime_error {
    CheckpointFault fault;
    checkpoint_error(CheckpointFault f, const std::string& msg)
        : std::runtime_error(msg), fault(f) {}
};

// Binary tensor container. Layout:
//   magic "UNISOTCK" | u32 version=1 | u32 entry count
//   per entry: u32 name length | name bytes | u8 dtype (0 = f64) | u8 rank |
//              u64 dims[rank] | little-endian f64 payload
struct Checkpoint {
    std::vector<std::pair<std::string, Tensor>> entries;

    static constexpr char kMagic[9] = "UNISOTCK";
    static constexpr uint32_t kVersion = 1;

    void put(const std::string& name, const Tensor& t) { entries.emplace_back(name, t); }

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : entries)
            if (n == name) return &t;
        return nullptr;
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw checkpoint_error(CheckpointFault::io, "cannot open for write: " + path);
        out.write(kMagic, 8);
        write_u32(out, kVersion);
        write_u32(out, static_cast<uint32_t>(entries.size()));
        for (const auto& [name, t] : entries) {
            write_u32(out, static_cast<uint32_t>(name.size()));
            out.write(name.data(), static_cast<std::streamsize>(name.size()));
            out.put(0);  // dtype f64
            out.put(static_cast<char>(t.rank()));
            for (int d : t.dims) write_u64(out, static_cast<uint64_t>(d));
            for (double v : t.data) write_f64(out, v);
        }
        if (!out) throw checkpoint_error(CheckpointFault::io, "write failed: " + path);
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw checkpoint_error(CheckpointFault::io, "cannot open: " + path);
        char magic[8];
        if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
            throw checkpoint_error(CheckpointFault::bad_magic, "bad magic in " + path);
        uint32_t version = read_u32(in, path);
        if (version != kVersion)
            throw checkpoint_error(CheckpointFault::bad_version,
                                   "unsupported version " + std::to_string(version));
        uint32_t count = read_u32(in, path);
        Checkpoint ck;
        for (uint32_t e = 0; e < count; ++e) {
            uint32_t name_len = read_u32(in, path);
            std::string name(name_len, '\0');
            if (!in.read(name.data(), name_len))
                throw checkpoint_error(CheckpointFault::truncated, "truncated name in " + path);
            int dtype = in.get();
            int rank = in.get();
            if (dtype != 0 || rank < 0 || in.eof())
                throw checkpoint_error(CheckpointFault::truncated, "truncated header in " + path);
            std::vector<int> dims(static_cast<size_t>(rank));
            for (int i = 0; i < rank; ++i) dims[static_cast<size_t>(i)] = static_cast<int>(read_u64(in, path));
            Tensor t(dims);
            for (int64_t i = 0; i < t.size(); ++i) t.data[static_cast<size_t>(i)] = read_f64(in, path);
            ck.entries.emplace_back(std::move(name), std::move(t));
        }
        return ck;
    }

private:
    static void write_u32(std::ostream& o, uint32_t v) {
        unsigned char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        o.write(reinterpret_cast<char*>(b), 4);
    }
    static void write_u64(std::ostream& o, uint64_t v) {
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        o.write(reinterpret_cast<char*>(b), 8);
    }
    static void write_f64(std::ostream& o, double v) {
        uint64_t u;
        std::memcpy(&u, &v, 8);
        write_u64(o, u);
    }
    static uint32_t read_u32(std::istream& in, const std::string& path) {
        unsigned char b[4];
        if (!in.read(reinterpret_cast<char*>(b), 4))
            throw checkpoint_error(CheckpointFault::truncated, "truncated u32 in " + path);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
        return v;
    }
    static uint64_t read_u64(std::istream& in, const std::string& path) {
        unsigned char b[8];
        if (!in.read(reinterpret_cast<char*>(b), 8))
            throw checkpoint_error(CheckpointFault::truncated, "truncated u64 in " + path);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
        return v;
    }
    static double read_f64(std::istream& in, const std::string& path) {
        uint64_t u = read_u64(in, path);
        double v;
        std::memcpy(&v, &u, 8);
        return v;
    }
};

// FNV-1a over tensor bytes; used to verify that frozen parameters stay intact.
inline uint64_t tensor_bytes_hash(const Tensor& t, uint64_t h = 1469598103934665603ULL) {
    auto mix = [&h](const unsigned char* p, size_t n) {
        for (size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 1099511628211ULL;
        }
    };
    for (int d : t.dims) {
        uint32_t u = static_cast<uint32_t>(d);
        mix(reinterpret_cast<const unsigned char*>(&u), 4);
    }
    mix(reinterpret_cast<const unsigned char*>(t.data.data()), t.data.size() * 8);
    return h;
}

}  // namespace unisot
