#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "consensus/error.hpp"

namespace consensus {

struct Shape {
    int height = 0;
    int width = 0;
    int channels = 0;

    std::size_t pixels() const { return static_cast<std::size_t>(height) * static_cast<std::size_t>(width); }
    std::size_t size() const { return pixels() * static_cast<std::size_t>(channels); }
    friend bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
    return std::to_string(s.height) + "x" + std::to_string(s.width) + "x" + std::to_string(s.channels);
}

/// Row-major H x W x C image. Intensities are nominally in [0, 1].
struct Image {
    Shape shape;
    std::vector<double> data;

    Image() = default;
    Image(int height, int width, int channels, double fill = 0.0)
        : shape{height, width, channels}, data(shape.size(), fill) {}

    int height() const { return shape.height; }
    int width() const { return shape.width; }
    int channels() const { return shape.channels; }
    std::size_t pixels() const { return shape.pixels(); }

    double& at(int r, int c, int ch) { return data[index(r, c, ch)]; }
    double at(int r, int c, int ch) const { return data[index(r, c, ch)]; }

    std::size_t index(int r, int c, int ch) const {
        return (static_cast<std::size_t>(r) * static_cast<std::size_t>(shape.width) + static_cast<std::size_t>(c)) *
                   static_cast<std::size_t>(shape.channels) +
               static_cast<std::size_t>(ch);
    }

    friend bool operator==(const Image&, const Image&) = default;
};

inline void validate_image(const Image& img) {
    require(img.height() >= 1 && img.width() >= 1, ErrorCode::InvalidImage, "image must be at least 1x1");
    require(img.channels() == 1 || img.channels() == 3, ErrorCode::InvalidImage,
            "image must have 1 or 3 channels, got " + std::to_string(img.channels()));
    require(img.data.size() == img.shape.size(), ErrorCode::InvalidImage, "image buffer does not match its shape");
    for (double v : img.data)
        require(std::isfinite(v), ErrorCode::InvalidImage, "image contains non-finite values");
}

enum class Granularity { superpixel, pixel };

/// Per-sample importance values. Superpixel maps have shape {K}; pixel maps
/// have shape {H, W}.
struct AttributionMap {
    std::vector<std::uint32_t> dims;
    std::vector<double> values;

    Granularity granularity() const { return dims.size() == 1 ? Granularity::superpixel : Granularity::pixel; }
    friend bool operator==(const AttributionMap&, const AttributionMap&) = default;
};

/// Label map with contiguous labels 0..K-1.
struct SuperpixelSegmentation {
    int height = 0;
    int width = 0;
    int num_segments = 0;
    std::vector<std::int32_t> labels;

    std::size_t pixels() const { return labels.size(); }
    friend bool operator==(const SuperpixelSegmentation&, const SuperpixelSegmentation&) = default;
};

inline void validate_segmentation(const SuperpixelSegmentation& seg) {
    require(seg.height >= 1 && seg.width >= 1, ErrorCode::InvalidArgument, "segmentation must be at least 1x1");
    require(seg.labels.size() == static_cast<std::size_t>(seg.height) * static_cast<std::size_t>(seg.width),
            ErrorCode::InvalidArgument, "segmentation label count does not match its dimensions");
    std::vector<bool> seen(static_cast<std::size_t>(std::max(seg.num_segments, 0)), false);
    for (auto l : seg.labels) {
        require(l >= 0 && l < seg.num_segments, ErrorCode::InvalidArgument,
                "label " + std::to_string(l) + " out of range");
        seen[static_cast<std::size_t>(l)] = true;
    }
    for (bool s : seen) require(s, ErrorCode::InvalidArgument, "segmentation labels are not contiguous");
}

/// Spreads one value per superpixel onto the pixel grid.
inline std::vector<double> broadcast_to_pixels(const std::vector<double>& per_segment,
                                               const SuperpixelSegmentation& seg) {
    require(per_segment.size() == static_cast<std::size_t>(seg.num_segments), ErrorCode::DimensionMismatch,
            "superpixel map has " + std::to_string(per_segment.size()) + " values, segmentation has " +
                std::to_string(seg.num_segments) + " segments");
    std::vector<double> out(seg.labels.size());
    for (std::size_t i = 0; i < seg.labels.size(); ++i) out[i] = per_segment[static_cast<std::size_t>(seg.labels[i])];
    return out;
}

/// Binary foreground map used as ground truth for alignment scores.
struct SegmentationMask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> foreground;

    std::size_t foreground_count() const {
        std::size_t n = 0;
        for (auto v : foreground) n += v ? 1 : 0;
        return n;
    }
};

}  // namespace consensus
