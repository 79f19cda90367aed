#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gsi3 {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Little-endian record writer for checkpoints.
class BinaryWriter {
public:
    explicit BinaryWriter(const std::filesystem::path& path) : out_(path, std::ios::binary), path_(path) {
        if (!out_) throw CheckpointError(path.string() + ": cannot open for writing");
    }

    void magic(std::string_view m) { out_.write(m.data(), static_cast<std::streamsize>(m.size())); }

    void u32(std::uint32_t v) { put(v); }
    void u64(std::uint64_t v) { put(v); }
    void f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
    void f64s(std::span<const double> v) {
        for (double x : v) f64(x);
    }

    void finish() {
        out_.flush();
        if (!out_) throw CheckpointError(path_.string() + ": write failed");
    }

private:
    template <typename U>
    void put(U v) {
        std::array<char, sizeof(U)> b;
        for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
        out_.write(b.data(), b.size());
    }

    std::ofstream out_;
    std::filesystem::path path_;
};

class BinaryReader {
public:
    explicit BinaryReader(const std::filesystem::path& path) : path_(path.string()) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw CheckpointError(path_ + ": cannot open");
        bytes_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }

    void expect_magic(std::string_view m) {
        need(m.size());
        if (std::string_view(bytes_.data() + pos_, m.size()) != m)
            throw CheckpointError(path_ + ": bad magic, expected " + std::string(m));
        pos_ += m.size();
    }

    std::uint32_t u32() { return get<std::uint32_t>(); }
    std::uint64_t u64() { return get<std::uint64_t>(); }
    double f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
    void f64s(std::span<double> out) {
        for (double& x : out) x = f64();
    }

    void expect_end() const {
        if (pos_ != bytes_.size()) throw CheckpointError(path_ + ": trailing bytes");
    }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw CheckpointError(path_ + ": truncated record");
    }

    template <typename U>
    U get() {
        need(sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i)
            v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += sizeof(U);
        return v;
    }

    std::string path_;
    std::vector<char> bytes_;
    std::size_t pos_ = 0;
};

} // namespace gsi3
