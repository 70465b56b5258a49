#pragma once

// LIME over superpixels and SmoothGrad over pixels, both driving a model
// only through the ModelBackend interface.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "consensus/backend.hpp"
#include "consensus/error.hpp"
#include "consensus/image.hpp"
#include "consensus/numeric.hpp"
#include "consensus/superpixel.hpp"

namespace consensus {

enum class FillMode { segment_mean, zero, gray };

inline FillMode parse_fill(const std::string& s) {
    if (s == "segment_mean" || s == "mean") return FillMode::segment_mean;
    if (s == "zero") return FillMode::zero;
    if (s == "gray") return FillMode::gray;
    fail(ErrorCode::InvalidArgument, "unknown fill '" + s + "'");
}

inline std::string to_string(FillMode f) {
    switch (f) {
        case FillMode::segment_mean: return "segment_mean";
        case FillMode::zero: return "zero";
        case FillMode::gray: return "gray";
    }
    return "segment_mean";
}

struct LimeConfig {
    int n_samples = 1000;
    double kernel_width = 0.25;
    double ridge_lambda = 1.0;
    FillMode fill = FillMode::segment_mean;
    double gray_value = 0.5;
    std::uint64_t rng_seed = 0;
    /// Upper bound on images per predict call.
    int batch_size = 32;
};

struct SmoothGradConfig {
    int n_samples = 50;
    /// Noise std as a fraction of (max(image) - min(image)).
    double noise_sigma_frac = 0.15;
    /// Absolute noise std; overrides the fraction when set.
    std::optional<double> noise_sigma;
    bool magnitude = true;
    std::uint64_t rng_seed = 0;
};

/// Keeps superpixels whose bit is set and replaces the rest with `fill`.
inline Image mask_image(const Image& image, const SuperpixelSegmentation& seg, const std::vector<bool>& mask_bits,
                        FillMode fill, double gray_value = 0.5,
                        const std::vector<std::vector<double>>* precomputed_means = nullptr) {
    check_same_grid(image, seg);
    require(mask_bits.size() == static_cast<std::size_t>(seg.num_segments), ErrorCode::DimensionMismatch,
            "mask has " + std::to_string(mask_bits.size()) + " bits for " + std::to_string(seg.num_segments) +
                " segments");
    std::vector<std::vector<double>> local_means;
    if (fill == FillMode::segment_mean && precomputed_means == nullptr) {
        local_means = segment_means(image, seg);
        precomputed_means = &local_means;
    }
    Image out = image;
    const auto C = static_cast<std::size_t>(image.channels());
    for (std::size_t p = 0; p < seg.labels.size(); ++p) {
        const auto k = static_cast<std::size_t>(seg.labels[p]);
        if (mask_bits[k]) continue;
        for (std::size_t ch = 0; ch < C; ++ch) {
            double v = 0.0;
            switch (fill) {
                case FillMode::segment_mean: v = (*precomputed_means)[k][ch]; break;
                case FillMode::zero: v = 0.0; break;
                case FillMode::gray: v = gray_value; break;
            }
            out.data[p * C + ch] = v;
        }
    }
    return out;
}

struct LimeFit {
    std::vector<double> coefficients;
    double intercept = 0.0;
    std::vector<std::vector<bool>> masks;
    std::vector<double> targets;
    std::vector<double> weights;
    std::vector<std::string> warnings;
};

/// Cosine distance between the all-ones vector and a mask with `ones` set
/// bits out of K; an empty mask is at distance 1.
inline double mask_cosine_distance(std::size_t ones, std::size_t K) {
    if (ones == 0) return 1.0;
    return 1.0 - std::sqrt(static_cast<double>(ones) / static_cast<double>(K));
}

/// Weighted ridge regression with an unpenalized intercept. Solves the
/// centered normal equations (X'WX + lambda I) beta = X'Wy.
inline std::pair<std::vector<double>, double> weighted_ridge(const std::vector<std::vector<bool>>& X,
                                                             const std::vector<double>& y,
                                                             const std::vector<double>& w, double lambda) {
    const std::size_t n = X.size();
    require(n > 0 && y.size() == n && w.size() == n, ErrorCode::InvalidArgument, "ridge inputs disagree in length");
    const std::size_t K = X.front().size();

    Eigen::MatrixXd A(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(K));
    Eigen::VectorXd b(static_cast<Eigen::Index>(n));
    Eigen::VectorXd sw(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < K; ++k)
            A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = X[i][k] ? 1.0 : 0.0;
        b(static_cast<Eigen::Index>(i)) = y[i];
        sw(static_cast<Eigen::Index>(i)) = w[i];
    }
    const double wsum = sw.sum();
    require(wsum > 0.0, ErrorCode::SingularSystem, "all sample weights are zero");
    const Eigen::RowVectorXd x_mean = (sw.asDiagonal() * A).colwise().sum() / wsum;
    const double y_mean = sw.dot(b) / wsum;
    const Eigen::MatrixXd Ac = A.rowwise() - x_mean;
    const Eigen::VectorXd bc = b.array() - y_mean;

    Eigen::MatrixXd gram = Ac.transpose() * sw.asDiagonal() * Ac;
    gram.diagonal().array() += lambda;
    const Eigen::VectorXd rhs = Ac.transpose() * (sw.asDiagonal() * bc);

    Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
    const bool ok = ldlt.info() == Eigen::Success && ldlt.isPositive() && ldlt.rcond() > 1e-12;
    require(ok, ErrorCode::SingularSystem,
            "ridge system is singular" + std::string(lambda == 0.0 ? " (use a positive ridge_lambda)" : ""));
    const Eigen::VectorXd beta = ldlt.solve(rhs);

    std::vector<double> coef(K);
    for (std::size_t k = 0; k < K; ++k) coef[k] = beta(static_cast<Eigen::Index>(k));
    const double intercept = y_mean - x_mean.dot(beta);
    return {coef, intercept};
}

inline LimeFit lime_fit(const Image& image, const SuperpixelSegmentation& seg, ModelBackend& backend, int target_class,
                        const LimeConfig& cfg) {
    validate_image(image);
    check_same_grid(image, seg);
    require(cfg.n_samples >= 1, ErrorCode::InvalidArgument, "LIME n_samples must be positive");
    require(cfg.kernel_width > 0.0, ErrorCode::InvalidArgument, "LIME kernel_width must be positive");
    require(cfg.ridge_lambda >= 0.0, ErrorCode::InvalidArgument, "LIME ridge_lambda must be >= 0");
    require(cfg.batch_size >= 1, ErrorCode::InvalidArgument, "batch size must be positive");
    require(backend.descriptor().can_predict, ErrorCode::CapabilityMissing,
            "model '" + backend.model_id() + "' cannot predict");
    require(target_class >= 0 && target_class < backend.num_classes(), ErrorCode::InvalidArgument,
            "target class out of range for model '" + backend.model_id() + "'");

    const auto K = static_cast<std::size_t>(seg.num_segments);
    const auto n = static_cast<std::size_t>(cfg.n_samples);
    LimeFit fit;
    if (n < K)
        fit.warnings.push_back("n_samples (" + std::to_string(n) + ") is below the superpixel count (" +
                               std::to_string(K) + ")");

    Rng rng(cfg.rng_seed);
    fit.masks.assign(n, std::vector<bool>(K, true));
    for (std::size_t i = 1; i < n; ++i)
        for (std::size_t k = 0; k < K; ++k) fit.masks[i][k] = rng.coin();

    const auto means = cfg.fill == FillMode::segment_mean ? segment_means(image, seg) : std::vector<std::vector<double>>{};
    fit.targets.resize(n);
    const auto batch = static_cast<std::size_t>(cfg.batch_size);
    for (std::size_t start = 0; start < n; start += batch) {
        const std::size_t stop = std::min(n, start + batch);
        std::vector<Image> images;
        images.reserve(stop - start);
        for (std::size_t i = start; i < stop; ++i)
            images.push_back(mask_image(image, seg, fit.masks[i], cfg.fill, cfg.gray_value, &means));
        const auto probs = backend.predict_batch(images);
        require(probs.size() == images.size(), ErrorCode::BackendFailure,
                "model '" + backend.model_id() + "' returned the wrong number of predictions");
        for (std::size_t i = start; i < stop; ++i)
            fit.targets[i] = probs[i - start].at(static_cast<std::size_t>(target_class));
    }

    fit.weights.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto ones = static_cast<std::size_t>(std::count(fit.masks[i].begin(), fit.masks[i].end(), true));
        const double d = mask_cosine_distance(ones, K);
        fit.weights[i] = std::exp(-(d * d) / (cfg.kernel_width * cfg.kernel_width));
    }

    auto [coef, intercept] = weighted_ridge(fit.masks, fit.targets, fit.weights, cfg.ridge_lambda);
    fit.coefficients = std::move(coef);
    fit.intercept = intercept;
    return fit;
}

/// Superpixel importance (length K): the LIME regression coefficients.
inline AttributionMap lime_explain(const Image& image, const SuperpixelSegmentation& seg, ModelBackend& backend,
                                   int target_class, const LimeConfig& cfg) {
    auto fit = lime_fit(image, seg, backend, target_class, cfg);
    return AttributionMap{{static_cast<std::uint32_t>(seg.num_segments)}, std::move(fit.coefficients)};
}

/// Pixel importance (H x W): mean gradient over noisy copies of the input,
/// reduced over channels.
inline AttributionMap smoothgrad_explain(const Image& image, ModelBackend& backend, int target_class,
                                         const SmoothGradConfig& cfg) {
    validate_image(image);
    require(cfg.n_samples >= 1, ErrorCode::InvalidArgument, "SmoothGrad n_samples must be positive");
    require(backend.descriptor().can_gradient, ErrorCode::CapabilityMissing,
            "model '" + backend.model_id() + "' does not provide gradients");
    const auto [lo, hi] = std::minmax_element(image.data.begin(), image.data.end());
    const double sigma = cfg.noise_sigma ? *cfg.noise_sigma : cfg.noise_sigma_frac * (*hi - *lo);
    require(sigma >= 0.0, ErrorCode::InvalidArgument, "SmoothGrad noise must be >= 0");

    Rng rng(cfg.rng_seed);
    std::vector<double> acc(image.data.size(), 0.0);
    Image noisy = image;
    for (int t = 0; t < cfg.n_samples; ++t) {
        for (std::size_t i = 0; i < image.data.size(); ++i) noisy.data[i] = image.data[i] + sigma * rng.normal();
        const Image g = backend.gradient(noisy, target_class);
        require(g.shape == image.shape, ErrorCode::BackendFailure,
                "model '" + backend.model_id() + "' returned a gradient of the wrong shape");
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += cfg.magnitude ? std::abs(g.data[i]) : g.data[i];
    }
    for (auto& v : acc) v /= cfg.n_samples;

    AttributionMap out;
    out.dims = {static_cast<std::uint32_t>(image.height()), static_cast<std::uint32_t>(image.width())};
    out.values.assign(image.pixels(), 0.0);
    const auto C = static_cast<std::size_t>(image.channels());
    for (std::size_t p = 0; p < image.pixels(); ++p)
        for (std::size_t ch = 0; ch < C; ++ch) out.values[p] += acc[p * C + ch];
    return out;
}

}  // namespace consensus
