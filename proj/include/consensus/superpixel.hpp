#pragma once

// Quickshift superpixels.
//
// Each pixel p is a point f(p) = (row, col, ratio * lab(color)) in a joint
// position/color space. A Gaussian Parzen estimate of the density is taken
// over a (2w+1)^2 window, w = ceil(3 * kernel_size). Every pixel then links
// to the nearest pixel of higher density inside the window; a link longer
// than max_dist is cut and the pixel becomes a root. The forest's trees are
// the superpixels, labelled by the raster order of their roots.
//
// "Higher" is a strict total order: larger density wins and equal densities
// are resolved in favour of the smaller raster index, so flat regions chain
// towards their first pixel instead of fragmenting.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "consensus/error.hpp"
#include "consensus/image.hpp"

namespace consensus {

struct QuickshiftParams {
    double ratio = 0.2;
    double kernel_size = 4.0;
    double max_dist = 200.0;
    double smoothing_sigma = 0.0;
};

inline void validate(const QuickshiftParams& p) {
    require(p.ratio > 0.0 && p.ratio <= 1.0, ErrorCode::InvalidArgument, "quickshift ratio must lie in (0, 1]");
    require(p.kernel_size > 0.0, ErrorCode::InvalidArgument, "quickshift kernel_size must be positive");
    require(p.max_dist > 0.0, ErrorCode::InvalidArgument, "quickshift max_dist must be positive");
    require(p.smoothing_sigma >= 0.0, ErrorCode::InvalidArgument, "quickshift smoothing_sigma must be >= 0");
}

/// Separable Gaussian blur over rows and columns with edge clamping.
inline Image gaussian_blur(const Image& img, double sigma) {
    if (sigma <= 0.0) return img;
    const int radius = std::max(1, static_cast<int>(std::ceil(4.0 * sigma)));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double w = std::exp(-0.5 * (i * i) / (sigma * sigma));
        kernel[static_cast<std::size_t>(i + radius)] = w;
        total += w;
    }
    for (auto& w : kernel) w /= total;

    const int H = img.height(), W = img.width(), C = img.channels();
    Image tmp(H, W, C), out(H, W, C);
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c)
            for (int ch = 0; ch < C; ++ch) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    acc += kernel[static_cast<std::size_t>(i + radius)] * img.at(r, std::clamp(c + i, 0, W - 1), ch);
                tmp.at(r, c, ch) = acc;
            }
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c)
            for (int ch = 0; ch < C; ++ch) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    acc += kernel[static_cast<std::size_t>(i + radius)] * tmp.at(std::clamp(r + i, 0, H - 1), c, ch);
                out.at(r, c, ch) = acc;
            }
    return out;
}

/// CIELAB (D65) from sRGB in [0,1]; single-channel input gives lightness only.
inline Image to_lab(const Image& img) {
    auto linear = [](double v) { return v <= 0.04045 ? v / 12.92 : std::pow((v + 0.055) / 1.055, 2.4); };
    auto f = [](double t) { return t > 216.0 / 24389.0 ? std::cbrt(t) : (24389.0 / 27.0 * t + 16.0) / 116.0; };
    Image out(img.height(), img.width(), img.channels());
    for (int r = 0; r < img.height(); ++r)
        for (int c = 0; c < img.width(); ++c) {
            if (img.channels() == 1) {
                out.at(r, c, 0) = 116.0 * f(linear(img.at(r, c, 0))) - 16.0;
                continue;
            }
            const double R = linear(img.at(r, c, 0)), G = linear(img.at(r, c, 1)), B = linear(img.at(r, c, 2));
            const double fx = f((0.4124564 * R + 0.3575761 * G + 0.1804375 * B) / 0.95047);
            const double fy = f(0.2126729 * R + 0.7151522 * G + 0.0721750 * B);
            const double fz = f((0.0193339 * R + 0.1191920 * G + 0.9503041 * B) / 1.08883);
            out.at(r, c, 0) = 116.0 * fy - 16.0;
            out.at(r, c, 1) = 500.0 * (fx - fy);
            out.at(r, c, 2) = 200.0 * (fy - fz);
        }
    return out;
}

namespace detail {

inline double feature_dist2(const Image& scaled, int r0, int c0, int r1, int c1) {
    const double dr = r0 - r1;
    const double dc = c0 - c1;
    double d = dr * dr + dc * dc;
    for (int ch = 0; ch < scaled.channels(); ++ch) {
        const double dv = scaled.at(r0, c0, ch) - scaled.at(r1, c1, ch);
        d += dv * dv;
    }
    return d;
}

}  // namespace detail

/// Per-pixel Parzen density in the joint feature space.
inline std::vector<double> quickshift_density(const Image& scaled, double kernel_size) {
    const int H = scaled.height(), W = scaled.width();
    const int w = static_cast<int>(std::ceil(3.0 * kernel_size));
    const double inv = -0.5 / (kernel_size * kernel_size);
    std::vector<double> density(scaled.pixels(), 0.0);
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) {
            double acc = 0.0;
            for (int rr = std::max(0, r - w); rr <= std::min(H - 1, r + w); ++rr)
                for (int cc = std::max(0, c - w); cc <= std::min(W - 1, c + w); ++cc)
                    acc += std::exp(detail::feature_dist2(scaled, r, c, rr, cc) * inv);
            density[static_cast<std::size_t>(r) * static_cast<std::size_t>(W) + static_cast<std::size_t>(c)] = acc;
        }
    return density;
}

inline SuperpixelSegmentation quickshift(const Image& image, const QuickshiftParams& params = {}) {
    validate_image(image);
    validate(params);
    const int H = image.height(), W = image.width();

    // Color distances live in Lab units (lightness 0..100), blurred first.
    Image scaled = to_lab(gaussian_blur(image, params.smoothing_sigma));
    for (auto& v : scaled.data) v *= params.ratio;

    const std::vector<double> density = quickshift_density(scaled, params.kernel_size);

    const int window = static_cast<int>(std::ceil(3.0 * params.kernel_size));
    const int reach = std::min(window, static_cast<int>(std::floor(params.max_dist)));
    const double max_dist2 = params.max_dist * params.max_dist;
    const std::size_t N = image.pixels();
    std::vector<std::size_t> parent(N);

    auto higher = [&](std::size_t q, std::size_t p) {
        return density[q] > density[p] || (density[q] == density[p] && q < p);
    };

    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) {
            const std::size_t p = static_cast<std::size_t>(r) * static_cast<std::size_t>(W) + static_cast<std::size_t>(c);
            parent[p] = p;
            double best = std::numeric_limits<double>::infinity();
            for (int rr = std::max(0, r - reach); rr <= std::min(H - 1, r + reach); ++rr)
                for (int cc = std::max(0, c - reach); cc <= std::min(W - 1, c + reach); ++cc) {
                    const std::size_t q =
                        static_cast<std::size_t>(rr) * static_cast<std::size_t>(W) + static_cast<std::size_t>(cc);
                    if (!higher(q, p)) continue;
                    const double d = detail::feature_dist2(scaled, r, c, rr, cc);
                    if (d < best) {
                        best = d;
                        parent[p] = q;
                    }
                }
            if (best > max_dist2) parent[p] = p;
        }

    // Parents are strictly higher, so every chain terminates at a root.
    std::vector<std::size_t> root(N);
    for (std::size_t p = 0; p < N; ++p) {
        std::size_t q = p;
        while (parent[q] != q) q = parent[q];
        root[p] = q;
    }

    SuperpixelSegmentation seg;
    seg.height = H;
    seg.width = W;
    seg.labels.assign(N, -1);
    std::vector<std::int32_t> root_label(N, -1);
    std::int32_t next = 0;
    for (std::size_t p = 0; p < N; ++p)
        if (parent[p] == p) root_label[p] = next++;
    for (std::size_t p = 0; p < N; ++p) seg.labels[p] = root_label[root[p]];
    seg.num_segments = next;
    return seg;
}

inline void check_same_grid(const Image& image, const SuperpixelSegmentation& seg) {
    require(image.height() == seg.height && image.width() == seg.width, ErrorCode::DimensionMismatch,
            "image is " + std::to_string(image.height()) + "x" + std::to_string(image.width()) +
                " but segmentation is " + std::to_string(seg.height) + "x" + std::to_string(seg.width));
    require(seg.labels.size() == image.pixels(), ErrorCode::DimensionMismatch, "segmentation label buffer size");
}

/// Mean color of every segment, as a K x C row-major matrix.
inline std::vector<std::vector<double>> segment_means(const Image& image, const SuperpixelSegmentation& seg) {
    check_same_grid(image, seg);
    const auto K = static_cast<std::size_t>(seg.num_segments);
    const auto C = static_cast<std::size_t>(image.channels());
    std::vector<std::vector<double>> sums(K, std::vector<double>(C, 0.0));
    std::vector<std::size_t> counts(K, 0);
    for (std::size_t p = 0; p < seg.labels.size(); ++p) {
        const auto k = static_cast<std::size_t>(seg.labels[p]);
        require(k < K, ErrorCode::DimensionMismatch, "segment label out of range");
        ++counts[k];
        for (std::size_t ch = 0; ch < C; ++ch) sums[k][ch] += image.data[p * C + ch];
    }
    for (std::size_t k = 0; k < K; ++k)
        if (counts[k] > 0)
            for (auto& v : sums[k]) v /= static_cast<double>(counts[k]);
    return sums;
}

}  // namespace consensus
