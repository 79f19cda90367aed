#pragma once

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gsi3/image.hpp"

namespace gsi3 {

enum class ImageIoErrc {
    open_failed,
    malformed_header,
    truncated_payload,
    unsupported_magic,
    write_failed,
};

inline const char* to_string(ImageIoErrc e) noexcept {
    switch (e) {
    case ImageIoErrc::open_failed: return "open failed";
    case ImageIoErrc::malformed_header: return "malformed header";
    case ImageIoErrc::truncated_payload: return "truncated payload";
    case ImageIoErrc::unsupported_magic: return "unsupported magic number";
    case ImageIoErrc::write_failed: return "write failed";
    }
    return "unknown";
}

class ImageIoError : public std::runtime_error {
public:
    ImageIoError(ImageIoErrc code, const std::string& path)
        : std::runtime_error(path + ": " + to_string(code)), code_(code) {}
    [[nodiscard]] ImageIoErrc code() const noexcept { return code_; }

private:
    ImageIoErrc code_;
};

namespace detail {

inline std::vector<char> slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ImageIoError(ImageIoErrc::open_failed, path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Netpbm-style header tokenizer: whitespace separated, '#' comments to end of line.
class HeaderReader {
public:
    HeaderReader(const std::vector<char>& bytes, std::string path)
        : bytes_(bytes), path_(std::move(path)) {}

    std::string token() {
        skip_space_and_comments();
        std::string tok;
        while (pos_ < bytes_.size() && !std::isspace(static_cast<unsigned char>(bytes_[pos_])))
            tok.push_back(bytes_[pos_++]);
        if (tok.empty()) throw ImageIoError(ImageIoErrc::malformed_header, path_);
        return tok;
    }

    long integer() {
        const auto tok = token();
        std::size_t used = 0;
        long v = 0;
        try {
            v = std::stol(tok, &used);
        } catch (const std::exception&) {
            throw ImageIoError(ImageIoErrc::malformed_header, path_);
        }
        if (used != tok.size()) throw ImageIoError(ImageIoErrc::malformed_header, path_);
        return v;
    }

    double real() {
        const auto tok = token();
        std::size_t used = 0;
        double v = 0;
        try {
            v = std::stod(tok, &used);
        } catch (const std::exception&) {
            throw ImageIoError(ImageIoErrc::malformed_header, path_);
        }
        if (used != tok.size()) throw ImageIoError(ImageIoErrc::malformed_header, path_);
        return v;
    }

    /// Consumes the single whitespace byte that separates header and payload.
    std::size_t payload_offset() {
        if (pos_ >= bytes_.size() || !std::isspace(static_cast<unsigned char>(bytes_[pos_])))
            throw ImageIoError(ImageIoErrc::malformed_header, path_);
        return pos_ + 1;
    }

private:
    void skip_space_and_comments() {
        while (pos_ < bytes_.size()) {
            if (bytes_[pos_] == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
            } else if (std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
                ++pos_;
            } else {
                break;
            }
        }
    }

    const std::vector<char>& bytes_;
    std::string path_;
    std::size_t pos_ = 0;
};

inline std::string magic_of(const std::vector<char>& bytes) {
    if (bytes.size() < 2) return {};
    return {bytes[0], bytes[1]};
}

struct PfmPayload {
    int width = 0, height = 0, channels = 0;
    std::vector<float> values; // top-down rows, interleaved
};

inline PfmPayload decode_pfm(const std::vector<char>& bytes, const std::string& path) {
    const auto magic = magic_of(bytes);
    int channels = 0;
    if (magic == "PF") channels = 3;
    else if (magic == "Pf") channels = 1;
    else throw ImageIoError(ImageIoErrc::unsupported_magic, path);

    HeaderReader hr(bytes, path);
    hr.token();
    const long w = hr.integer();
    const long h = hr.integer();
    const double scale = hr.real();
    if (w < 1 || h < 1 || scale == 0.0 || !std::isfinite(scale))
        throw ImageIoError(ImageIoErrc::malformed_header, path);
    const std::size_t offset = hr.payload_offset();
    const std::size_t count = static_cast<std::size_t>(w) * h * channels;
    if (bytes.size() - offset < count * sizeof(float))
        throw ImageIoError(ImageIoErrc::truncated_payload, path);

    const bool little = scale < 0.0;
    PfmPayload out{static_cast<int>(w), static_cast<int>(h), channels, std::vector<float>(count)};
    const std::size_t row = static_cast<std::size_t>(w) * channels;
    for (long y = 0; y < h; ++y) {
        // PFM stores the bottom row first.
        const char* src = bytes.data() + offset + static_cast<std::size_t>(h - 1 - y) * row * 4;
        for (std::size_t i = 0; i < row; ++i) {
            std::uint32_t u;
            std::memcpy(&u, src + 4 * i, 4);
            if (little != (std::endian::native == std::endian::little)) u = __builtin_bswap32(u);
            out.values[static_cast<std::size_t>(y) * row + i] = std::bit_cast<float>(u);
        }
    }
    return out;
}

inline void encode_pfm(const std::filesystem::path& path, int w, int h, int channels,
                       std::span<const double> values) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ImageIoError(ImageIoErrc::write_failed, path.string());
    out << (channels == 3 ? "PF" : "Pf") << '\n' << w << ' ' << h << '\n' << "-1.0" << '\n';
    const std::size_t row = static_cast<std::size_t>(w) * channels;
    std::vector<char> buf(row * 4);
    for (int y = h - 1; y >= 0; --y) {
        for (std::size_t i = 0; i < row; ++i) {
            auto u = std::bit_cast<std::uint32_t>(
                static_cast<float>(values[static_cast<std::size_t>(y) * row + i]));
            if constexpr (std::endian::native != std::endian::little) u = __builtin_bswap32(u);
            std::memcpy(buf.data() + 4 * i, &u, 4);
        }
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    }
    if (!out) throw ImageIoError(ImageIoErrc::write_failed, path.string());
}

} // namespace detail

/// 8-bit quantization used for PPM output.
inline std::uint8_t to_byte(double v) noexcept {
    return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)));
}

/// Reads a binary PPM (P6, maxval 255) or a three-channel PFM.
inline ImageRGB read_image(const std::filesystem::path& path) {
    const auto bytes = detail::slurp(path);
    const auto magic = detail::magic_of(bytes);
    if (magic == "PF" || magic == "Pf") {
        auto pfm = detail::decode_pfm(bytes, path.string());
        if (pfm.channels != 3) throw ImageIoError(ImageIoErrc::unsupported_magic, path.string());
        ImageRGB img(pfm.width, pfm.height);
        std::copy(pfm.values.begin(), pfm.values.end(), img.data().begin());
        return img;
    }
    if (magic != "P6") throw ImageIoError(ImageIoErrc::unsupported_magic, path.string());

    detail::HeaderReader hr(bytes, path.string());
    hr.token();
    const long w = hr.integer();
    const long h = hr.integer();
    const long maxval = hr.integer();
    if (w < 1 || h < 1 || maxval != 255)
        throw ImageIoError(ImageIoErrc::malformed_header, path.string());
    const std::size_t offset = hr.payload_offset();
    const std::size_t count = static_cast<std::size_t>(w) * h * 3;
    if (bytes.size() - offset < count)
        throw ImageIoError(ImageIoErrc::truncated_payload, path.string());
    ImageRGB img(static_cast<int>(w), static_cast<int>(h));
    for (std::size_t i = 0; i < count; ++i)
        img.data()[i] = static_cast<unsigned char>(bytes[offset + i]) / 255.0;
    return img;
}

/// Reads a single-channel PFM.
inline ScalarMap read_scalar_map(const std::filesystem::path& path) {
    const auto bytes = detail::slurp(path);
    auto pfm = detail::decode_pfm(bytes, path.string());
    if (pfm.channels != 1) throw ImageIoError(ImageIoErrc::unsupported_magic, path.string());
    ScalarMap map(pfm.width, pfm.height);
    std::copy(pfm.values.begin(), pfm.values.end(), map.data().begin());
    return map;
}

/// Writes P6 for ".ppm" paths and a three-channel PFM for ".pfm" paths. PFM stores
/// 32-bit floats, so values are rounded to float on write; float-valued buffers
/// survive a round trip bit-exactly.
inline void write_image(const ImageRGB& img, const std::filesystem::path& path) {
    const auto ext = path.extension().string();
    if (ext == ".pfm") {
        detail::encode_pfm(path, img.width(), img.height(), 3, img.data());
        return;
    }
    if (ext != ".ppm") throw ImageIoError(ImageIoErrc::unsupported_magic, path.string());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ImageIoError(ImageIoErrc::write_failed, path.string());
    out << "P6\n" << img.width() << ' ' << img.height() << "\n255\n";
    std::vector<char> buf(img.data().size());
    std::transform(img.data().begin(), img.data().end(), buf.begin(),
                   [](double v) { return static_cast<char>(to_byte(v)); });
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw ImageIoError(ImageIoErrc::write_failed, path.string());
}

inline void write_scalar_map(const ScalarMap& map, const std::filesystem::path& path) {
    detail::encode_pfm(path, map.width(), map.height(), 1, map.data());
}

} // namespace gsi3
