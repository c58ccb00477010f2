// SPDX-License-Identifier: Apache-2.0
#include "ada/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "ada/error.hpp"

namespace ada {

namespace {

constexpr char kMagic[4] = {'A', 'D', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 8);
}

void write_f64(std::ostream& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    write_u64(out, bits);
}

std::uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw CheckpointError("tensor store: truncated file");
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

std::uint64_t read_u64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw CheckpointError("tensor store: truncated file");
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

double read_f64(std::istream& in) {
    std::uint64_t bits = read_u64(in);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

}  // namespace

void TensorStore::put(std::string name, const Tensor& t) {
    NamedTensor e;
    e.name = std::move(name);
    e.shape = t.shape();
    e.values.assign(t.values().begin(), t.values().end());
    put(std::move(e));
}

void TensorStore::put(NamedTensor entry) {
    if (find(entry.name)) throw CheckpointError("tensor store: duplicate name " + entry.name);
    entries_.push_back(std::move(entry));
}

const NamedTensor* TensorStore::find(const std::string& name) const {
    for (const auto& e : entries_)
        if (e.name == name) return &e;
    return nullptr;
}

void TensorStore::write(std::ostream& out) const {
    out.write(kMagic, 4);
    write_u32(out, kVersion);
    write_u64(out, entries_.size());
    for (const auto& e : entries_) {
        write_u32(out, static_cast<std::uint32_t>(e.name.size()));
        out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        write_u32(out, static_cast<std::uint32_t>(e.shape.size()));
        std::size_t count = 1;
        for (std::size_t ext : e.shape) {
            write_u64(out, ext);
            count *= ext;
        }
        if (count != e.values.size())
            throw CheckpointError("tensor store: entry " + e.name + " has inconsistent size");
        for (double v : e.values) write_f64(out, v);
    }
    if (!out) throw CheckpointError("tensor store: write failed");
}

TensorStore TensorStore::read(std::istream& in) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw CheckpointError("tensor store: bad magic, file is not a tensor store");
    const std::uint32_t version = read_u32(in);
    if (version != kVersion)
        throw CheckpointError("tensor store: unsupported version " + std::to_string(version));
    const std::uint64_t count = read_u64(in);
    TensorStore store;
    for (std::uint64_t i = 0; i < count; ++i) {
        NamedTensor e;
        const std::uint32_t name_len = read_u32(in);
        e.name.resize(name_len);
        in.read(e.name.data(), name_len);
        if (!in) throw CheckpointError("tensor store: truncated name");
        const std::uint32_t rank = read_u32(in);
        std::size_t n = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            const std::uint64_t ext = read_u64(in);
            if (ext == 0) throw CheckpointError("tensor store: zero extent in " + e.name);
            e.shape.push_back(static_cast<std::size_t>(ext));
            n *= static_cast<std::size_t>(ext);
        }
        e.values.resize(n);
        for (std::size_t j = 0; j < n; ++j) e.values[j] = read_f64(in);
        store.put(std::move(e));
    }
    return store;
}

void TensorStore::save_file(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("tensor store: cannot open " + path + " for writing");
    write(out);
}

TensorStore TensorStore::load_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("tensor store: cannot open " + path);
    return read(in);
}

}  // namespace ada
