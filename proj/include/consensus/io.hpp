#pragma once

// Binary attribution files, image and mask decoding, atomic writes.
//
// Attribution file layout (all integers little-endian):
//   "ATTR1"            5 bytes magic
//   kind               1 byte   0 = float32 values, 1 = int32 labels
//   rank               1 byte   1..3
//   dims[rank]         uint32 each
//   payload            product(dims) * 4 bytes, row-major

#include <png.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cerrno>
#include <cstdint>
#include <cctype>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <span>
#include <fstream>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "consensus/error.hpp"
#include "consensus/image.hpp"

namespace consensus {

namespace fs = std::filesystem;

inline std::vector<std::uint8_t> read_file_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::Io, "cannot open '" + path.string() + "'");
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

/// Writes to a sibling temporary file and renames it over `path`.
inline void write_file_atomic(const fs::path& path, const void* data, std::size_t size) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(static_cast<bool>(out), ErrorCode::Io, "cannot write '" + tmp.string() + "'");
        out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
        require(static_cast<bool>(out), ErrorCode::Io, "short write to '" + tmp.string() + "'");
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp);
        fail(ErrorCode::Io, "cannot rename into '" + path.string() + "': " + ec.message());
    }
}

inline void write_text_atomic(const fs::path& path, const std::string& text) {
    write_file_atomic(path, text.data(), text.size());
}

inline std::string read_text(const fs::path& path) {
    const auto bytes = read_file_bytes(path);
    return std::string(bytes.begin(), bytes.end());
}

// ---------------------------------------------------------------------------
// ATTR1
// ---------------------------------------------------------------------------

enum class PayloadKind : std::uint8_t { float32 = 0, int32 = 1 };

struct AttrPayload {
    PayloadKind kind = PayloadKind::float32;
    std::vector<std::uint32_t> dims;
    std::vector<float> floats;
    std::vector<std::int32_t> ints;
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

constexpr std::array<char, 5> kAttrMagic{'A', 'T', 'T', 'R', '1'};
constexpr std::uint64_t kMaxAttrElements = std::uint64_t{1} << 32;

inline std::uint64_t element_count(const std::vector<std::uint32_t>& dims) {
    std::uint64_t n = 1;
    for (auto d : dims) {
        n *= d;
        require(n <= kMaxAttrElements, ErrorCode::DimOverflow, "attribution dims exceed 2^32 elements");
    }
    return n;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_attr(const AttrPayload& payload) {
    require(payload.dims.size() >= 1 && payload.dims.size() <= 3, ErrorCode::InvalidArgument,
            "attribution rank must be 1, 2 or 3");
    const std::uint64_t n = detail::element_count(payload.dims);
    const std::size_t have = payload.kind == PayloadKind::float32 ? payload.floats.size() : payload.ints.size();
    require(have == n, ErrorCode::DimensionMismatch, "payload size does not match dims");

    std::vector<std::uint8_t> out(detail::kAttrMagic.begin(), detail::kAttrMagic.end());
    out.push_back(static_cast<std::uint8_t>(payload.kind));
    out.push_back(static_cast<std::uint8_t>(payload.dims.size()));
    for (auto d : payload.dims) detail::put_u32(out, d);
    out.reserve(out.size() + n * 4);
    for (std::size_t i = 0; i < have; ++i) {
        const std::uint32_t bits = payload.kind == PayloadKind::float32
                                       ? std::bit_cast<std::uint32_t>(payload.floats[i])
                                       : std::bit_cast<std::uint32_t>(payload.ints[i]);
        detail::put_u32(out, bits);
    }
    return out;
}

inline AttrPayload decode_attr(std::span<const std::uint8_t> bytes) {
    require(bytes.size() >= 7 && std::equal(detail::kAttrMagic.begin(), detail::kAttrMagic.end(), bytes.begin()),
            ErrorCode::BadMagic, "not an ATTR1 file");
    AttrPayload out;
    require(bytes[5] <= 1, ErrorCode::ParseError, "unknown payload kind " + std::to_string(bytes[5]));
    out.kind = static_cast<PayloadKind>(bytes[5]);
    const std::size_t rank = bytes[6];
    require(rank >= 1 && rank <= 3, ErrorCode::ParseError, "rank must be 1..3, got " + std::to_string(rank));
    std::size_t pos = 7;
    require(bytes.size() >= pos + 4 * rank, ErrorCode::TruncatedFile, "header is truncated");
    for (std::size_t i = 0; i < rank; ++i, pos += 4) out.dims.push_back(detail::get_u32(bytes.data() + pos));
    const std::uint64_t n = detail::element_count(out.dims);
    require(bytes.size() - pos >= n * 4, ErrorCode::TruncatedFile,
            "payload holds " + std::to_string((bytes.size() - pos) / 4) + " values, dims imply " + std::to_string(n));
    require(bytes.size() - pos == n * 4, ErrorCode::ParseError, "trailing bytes after payload");
    if (out.kind == PayloadKind::float32) {
        out.floats.resize(n);
        for (std::size_t i = 0; i < n; ++i, pos += 4) out.floats[i] = std::bit_cast<float>(detail::get_u32(bytes.data() + pos));
    } else {
        out.ints.resize(n);
        for (std::size_t i = 0; i < n; ++i, pos += 4)
            out.ints[i] = std::bit_cast<std::int32_t>(detail::get_u32(bytes.data() + pos));
    }
    return out;
}

/// Stores the map as float32.
inline void write_attr(const fs::path& path, const AttributionMap& map) {
    AttrPayload p;
    p.dims = map.dims;
    p.floats.assign(map.values.begin(), map.values.end());
    const auto bytes = encode_attr(p);
    write_file_atomic(path, bytes.data(), bytes.size());
}

inline AttributionMap read_attr(const fs::path& path) {
    const auto p = decode_attr(read_file_bytes(path));
    require(p.kind == PayloadKind::float32, ErrorCode::ParseError, "'" + path.string() + "' holds labels, not values");
    return AttributionMap{p.dims, std::vector<double>(p.floats.begin(), p.floats.end())};
}

inline void write_labels(const fs::path& path, const SuperpixelSegmentation& seg) {
    AttrPayload p;
    p.kind = PayloadKind::int32;
    p.dims = {static_cast<std::uint32_t>(seg.height), static_cast<std::uint32_t>(seg.width)};
    p.ints = seg.labels;
    const auto bytes = encode_attr(p);
    write_file_atomic(path, bytes.data(), bytes.size());
}

inline SuperpixelSegmentation read_labels(const fs::path& path) {
    const auto p = decode_attr(read_file_bytes(path));
    require(p.kind == PayloadKind::int32 && p.dims.size() == 2, ErrorCode::ParseError,
            "'" + path.string() + "' is not a label map");
    SuperpixelSegmentation seg;
    seg.height = static_cast<int>(p.dims[0]);
    seg.width = static_cast<int>(p.dims[1]);
    seg.labels = p.ints;
    seg.num_segments = seg.labels.empty() ? 0 : *std::max_element(seg.labels.begin(), seg.labels.end()) + 1;
    validate_segmentation(seg);
    return seg;
}

// ---------------------------------------------------------------------------
// Images: binary PNM (P5/P6) and PNG.
// ---------------------------------------------------------------------------

namespace detail {

struct RawRaster {
    int width = 0, height = 0, channels = 0;
    int bit_depth = 8;
    std::vector<std::uint16_t> samples;  // row-major, interleaved
    int maxval = 255;
};

inline RawRaster read_pnm(const fs::path& path) {
    const auto bytes = read_file_bytes(path);
    std::size_t pos = 0;
    auto skip_space = [&] {
        for (;;) {
            while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
            if (pos < bytes.size() && bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
                continue;
            }
            return;
        }
    };
    auto read_int = [&] {
        skip_space();
        require(pos < bytes.size() && std::isdigit(bytes[pos]), ErrorCode::ParseError, "bad PNM header in '" + path.string() + "'");
        long v = 0;
        while (pos < bytes.size() && std::isdigit(bytes[pos])) v = v * 10 + (bytes[pos++] - '0');
        return static_cast<int>(v);
    };
    require(bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '5' || bytes[1] == '6'), ErrorCode::UnsupportedFormat,
            "'" + path.string() + "' is not a binary PGM/PPM");
    RawRaster r;
    r.channels = bytes[1] == '5' ? 1 : 3;
    pos = 2;
    r.width = read_int();
    r.height = read_int();
    r.maxval = read_int();
    require(r.width > 0 && r.height > 0 && r.maxval > 0 && r.maxval <= 65535, ErrorCode::ParseError,
            "bad PNM dimensions in '" + path.string() + "'");
    ++pos;  // single whitespace before raster
    r.bit_depth = r.maxval > 255 ? 16 : 8;
    const std::size_t n = static_cast<std::size_t>(r.width) * r.height * r.channels;
    const std::size_t need = n * (r.bit_depth == 16 ? 2 : 1);
    require(bytes.size() >= pos + need, ErrorCode::TruncatedFile, "PNM raster truncated in '" + path.string() + "'");
    r.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        r.samples[i] = r.bit_depth == 16 ? static_cast<std::uint16_t>((bytes[pos + 2 * i] << 8) | bytes[pos + 2 * i + 1])
                                         : bytes[pos + i];
    return r;
}

inline RawRaster read_png(const fs::path& path, bool allow_16bit) {
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    require(png_image_begin_read_from_file(&img, path.c_str()) != 0, ErrorCode::ParseError,
            "cannot decode PNG '" + path.string() + "': " + img.message);
    const bool sixteen = (img.format & PNG_FORMAT_FLAG_LINEAR) != 0;
    if (sixteen && !allow_16bit) {
        png_image_free(&img);
        fail(ErrorCode::UnsupportedFormat, "'" + path.string() + "' is a 16-bit PNG; 8-bit grayscale expected");
    }
    const bool color = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
    RawRaster r;
    r.width = static_cast<int>(img.width);
    r.height = static_cast<int>(img.height);
    r.channels = color ? 3 : 1;
    r.bit_depth = sixteen ? 16 : 8;
    r.maxval = sixteen ? 65535 : 255;
    img.format = sixteen ? (color ? PNG_FORMAT_LINEAR_RGB : PNG_FORMAT_LINEAR_Y) : (color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY);
    const std::size_t n = static_cast<std::size_t>(r.width) * r.height * r.channels;
    r.samples.resize(n);
    if (sixteen) {
        if (png_image_finish_read(&img, nullptr, r.samples.data(), 0, nullptr) == 0)
            fail(ErrorCode::ParseError, "cannot decode PNG '" + path.string() + "': " + img.message);
    } else {
        std::vector<std::uint8_t> buf(n);
        if (png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr) == 0)
            fail(ErrorCode::ParseError, "cannot decode PNG '" + path.string() + "': " + img.message);
        std::copy(buf.begin(), buf.end(), r.samples.begin());
    }
    return r;
}

inline std::string lower_extension(const fs::path& path) {
    std::string ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return ext;
}

inline RawRaster read_raster(const fs::path& path, bool allow_16bit) {
    require(fs::exists(path), ErrorCode::Io, "no such file '" + path.string() + "'");
    const auto ext = lower_extension(path);
    if (ext == ".png") return read_png(path, allow_16bit);
    if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") {
        auto r = read_pnm(path);
        require(allow_16bit || r.bit_depth == 8, ErrorCode::UnsupportedFormat, "'" + path.string() + "' is 16-bit");
        return r;
    }
    fail(ErrorCode::UnsupportedFormat, "unsupported image format '" + path.string() + "'");
}

}  // namespace detail

/// Decodes a PNG/PGM/PPM into an image scaled to [0, 1].
inline Image read_image(const fs::path& path) {
    const auto r = detail::read_raster(path, true);
    Image img(r.height, r.width, r.channels);
    for (std::size_t i = 0; i < r.samples.size(); ++i) img.data[i] = static_cast<double>(r.samples[i]) / r.maxval;
    return img;
}

/// Writes an 8-bit binary PGM (1 channel) or PPM (3 channels).
inline void write_pnm(const fs::path& path, const Image& img) {
    require(img.channels() == 1 || img.channels() == 3, ErrorCode::InvalidArgument, "PNM needs 1 or 3 channels");
    std::ostringstream out;
    out << (img.channels() == 1 ? "P5" : "P6") << "\n" << img.width() << " " << img.height() << "\n255\n";
    std::string text = out.str();
    for (double v : img.data)
        text.push_back(static_cast<char>(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
    write_text_atomic(path, text);
}

/// 8-bit grayscale PNG.
inline void write_png_gray8(const fs::path& path, int width, int height, const std::vector<std::uint8_t>& pixels) {
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(width);
    img.height = static_cast<png_uint_32>(height);
    img.format = PNG_FORMAT_GRAY;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    require(png_image_write_to_file(&img, path.c_str(), 0, pixels.data(), 0, nullptr) != 0, ErrorCode::Io,
            "cannot write PNG '" + path.string() + "'");
}

/// Label map as a 16-bit grayscale PNG for inspection.
inline void write_labels_png(const fs::path& path, const SuperpixelSegmentation& seg) {
    require(seg.num_segments <= 65536, ErrorCode::DimOverflow, "too many segments for a 16-bit PNG");
    std::vector<std::uint16_t> px(seg.labels.begin(), seg.labels.end());
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(seg.width);
    img.height = static_cast<png_uint_32>(seg.height);
    img.format = PNG_FORMAT_LINEAR_Y;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    require(png_image_write_to_file(&img, path.c_str(), 0, px.data(), 0, nullptr) != 0, ErrorCode::Io,
            "cannot write PNG '" + path.string() + "'");
}

inline SuperpixelSegmentation read_labels_png(const fs::path& path) {
    const auto r = detail::read_raster(path, true);
    require(r.channels == 1, ErrorCode::UnsupportedFormat, "label PNG must be grayscale");
    SuperpixelSegmentation seg;
    seg.height = r.height;
    seg.width = r.width;
    seg.labels.assign(r.samples.begin(), r.samples.end());
    seg.num_segments = seg.labels.empty() ? 0 : *std::max_element(seg.labels.begin(), seg.labels.end()) + 1;
    return seg;
}

/// Loads an 8-bit grayscale PNG or PGM; nonzero pixels are foreground.
inline SegmentationMask load_mask(const fs::path& path) {
    const auto r = detail::read_raster(path, false);
    require(r.channels == 1, ErrorCode::UnsupportedFormat, "mask '" + path.string() + "' must be grayscale");
    SegmentationMask m;
    m.height = r.height;
    m.width = r.width;
    m.foreground.resize(r.samples.size());
    for (std::size_t i = 0; i < r.samples.size(); ++i) m.foreground[i] = r.samples[i] != 0 ? 1 : 0;
    require(m.foreground_count() > 0, ErrorCode::EmptyMask, "mask '" + path.string() + "' has no foreground");
    return m;
}

inline void write_mask_pgm(const fs::path& path, const SegmentationMask& mask) {
    Image img(mask.height, mask.width, 1);
    for (std::size_t i = 0; i < mask.foreground.size(); ++i) img.data[i] = mask.foreground[i] ? 1.0 : 0.0;
    write_pnm(path, img);
}

}  // namespace consensus
