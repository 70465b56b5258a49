#pragma once

#include <boost/math/special_functions/beta.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "consensus/error.hpp"
#include "consensus/image.hpp"
#include "consensus/numeric.hpp"

namespace consensus {

/// Average precision of a score map against a binary mask.
///
/// Pixels are ranked by descending score. Equal scores form one block: the
/// block is admitted as a whole and each of its positives is credited with
/// the precision reached after the block. The result therefore does not
/// depend on the order of tied pixels.
inline double average_precision(std::span<const double> scores, std::span<const std::uint8_t> mask) {
    require(scores.size() == mask.size(), ErrorCode::DimensionMismatch,
            "score map has " + std::to_string(scores.size()) + " entries, mask has " + std::to_string(mask.size()));
    std::size_t positives = 0;
    for (auto v : mask) positives += v ? 1 : 0;
    require(positives > 0, ErrorCode::NoPositives, "mask has no foreground pixels");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    // One (hits in block, cumulative hits, cumulative seen) triple per block.
    struct Block {
        std::size_t block_hits, hits, seen;
    };
    std::vector<Block> blocks;
    std::size_t seen = 0, hits = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        std::size_t block_hits = 0;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            block_hits += mask[order[j]] ? 1 : 0;
            ++j;
        }
        seen += j - i;
        hits += block_hits;
        if (block_hits > 0) blocks.push_back({block_hits, hits, seen});
        i = j;
    }

    // Exact rational sum while it fits in 64 bits, so the result is the
    // correctly rounded AP; long inputs fall back to floating point.
    std::int64_t num = 0, den = 1;
    bool exact = true;
    for (const auto& b : blocks) {
        const auto bn = static_cast<std::int64_t>(b.block_hits * b.hits);
        const auto bd = static_cast<std::int64_t>(b.seen);
        const std::int64_t g = std::gcd(den, bd);
        std::int64_t lhs = 0, rhs = 0, nd = 0;
        if (__builtin_mul_overflow(num, bd / g, &lhs) || __builtin_mul_overflow(bn, den / g, &rhs) ||
            __builtin_add_overflow(lhs, rhs, &num) || __builtin_mul_overflow(den, bd / g, &nd)) {
            exact = false;
            break;
        }
        den = nd;
        const std::int64_t r = std::gcd(num, den);
        num /= r;
        den /= r;
    }
    if (exact) {
        std::int64_t full_den = 0;
        if (!__builtin_mul_overflow(den, static_cast<std::int64_t>(positives), &full_den)) {
            const std::int64_t r = std::gcd(num, full_den);
            if (num / r < (std::int64_t{1} << 53) && full_den / r < (std::int64_t{1} << 53))
                return static_cast<double>(num / r) / static_cast<double>(full_den / r);
        }
    }
    KahanSum sum;
    for (const auto& b : blocks)
        sum.add(static_cast<double>(b.block_hits) * static_cast<double>(b.hits) / static_cast<double>(b.seen));
    return sum.value() / static_cast<double>(positives);
}

inline double average_precision(std::span<const double> scores, const SegmentationMask& mask) {
    return average_precision(scores, std::span<const std::uint8_t>(mask.foreground));
}

struct MeanApResult {
    double map = 0.0;
    std::vector<double> per_sample;  ///< NaN for skipped samples
    std::size_t skipped = 0;
};

inline MeanApResult mean_ap(const std::vector<std::vector<double>>& score_maps, const std::vector<SegmentationMask>& masks) {
    require(score_maps.size() == masks.size(), ErrorCode::DimensionMismatch, "one mask per score map required");
    require(!score_maps.empty(), ErrorCode::EmptyDataset, "no samples");
    MeanApResult out;
    std::vector<double> valid;
    for (std::size_t i = 0; i < score_maps.size(); ++i) {
        try {
            const double ap = average_precision(score_maps[i], masks[i]);
            out.per_sample.push_back(ap);
            valid.push_back(ap);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::NoPositives) throw;
            out.per_sample.push_back(std::nan(""));
            ++out.skipped;
        }
    }
    require(!valid.empty(), ErrorCode::EmptyDataset, "every sample lacks foreground");
    out.map = compensated_mean(valid);
    return out;
}

struct CorrelationResult {
    double r = 0.0;
    double p_value = 1.0;
    std::size_t n = 0;
};

/// Two-sided p-value of a Pearson r over n points, from Student's t with
/// n - 2 degrees of freedom: P(|T| >= |t|) = I_{df/(df+t^2)}(df/2, 1/2).
inline double pearson_p_value(double r, std::size_t n) {
    require(n >= 3, ErrorCode::TooFewPoints, "p-value needs at least 3 points");
    const double df = static_cast<double>(n - 2);
    const double r2 = r * r;
    if (r2 >= 1.0) return 0.0;
    // df / (df + t^2) with t^2 = df r^2 / (1 - r^2) simplifies to 1 - r^2.
    const double x = 1.0 - r2;
    return std::clamp(boost::math::ibeta(df / 2.0, 0.5, x), 0.0, 1.0);
}

inline CorrelationResult pearson(std::span<const double> x, std::span<const double> y) {
    require(x.size() == y.size(), ErrorCode::DimensionMismatch, "pearson inputs differ in length");
    require(x.size() >= 3, ErrorCode::TooFewPoints, "pearson needs at least 3 points, got " + std::to_string(x.size()));
    const double mx = compensated_mean(x);
    const double my = compensated_mean(y);
    KahanSum sxy, sxx, syy;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx;
        const double dy = y[i] - my;
        sxy.add(dx * dy);
        sxx.add(dx * dx);
        syy.add(dy * dy);
    }
    require(sxx.value() > 0.0 && syy.value() > 0.0, ErrorCode::ZeroVariance, "pearson input has zero variance");
    CorrelationResult out;
    out.n = x.size();
    out.r = std::clamp(sxy.value() / std::sqrt(sxx.value() * syy.value()), -1.0, 1.0);
    out.p_value = pearson_p_value(out.r, out.n);
    return out;
}

enum class EnsembleMode { avg, vote };

inline EnsembleMode parse_ensemble_mode(const std::string& s) {
    if (s == "avg" || s == "average") return EnsembleMode::avg;
    if (s == "vote") return EnsembleMode::vote;
    fail(ErrorCode::InvalidArgument, "unknown ensemble mode '" + s + "'");
}

inline std::size_t argmax(std::span<const double> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Top-1 accuracy of a committee. probs[model][sample] is a probability
/// vector. `avg` takes the argmax of the mean probability vector; `vote`
/// takes the plurality of per-model argmaxes, breaking ties by the mean
/// probability among the tied classes (then by the lower class index).
inline double ensemble_accuracy(const std::vector<std::vector<std::vector<double>>>& probs,
                                std::span<const int> labels, EnsembleMode mode) {
    require(!probs.empty(), ErrorCode::ShapeMismatch, "no models");
    const std::size_t N = labels.size();
    require(N > 0, ErrorCode::EmptyDataset, "no samples");
    const std::size_t classes = probs.front().empty() ? 0 : probs.front().front().size();
    require(classes >= 1, ErrorCode::ShapeMismatch, "empty probability vectors");
    for (const auto& model : probs) {
        require(model.size() == N, ErrorCode::ShapeMismatch, "every model needs one prediction per sample");
        for (const auto& p : model) require(p.size() == classes, ErrorCode::ShapeMismatch, "class counts differ");
    }
    for (int l : labels)
        require(l >= 0 && static_cast<std::size_t>(l) < classes, ErrorCode::ShapeMismatch, "label out of range");

    std::size_t correct = 0;
    for (std::size_t n = 0; n < N; ++n) {
        std::vector<double> mean(classes, 0.0);
        for (const auto& model : probs)
            for (std::size_t c = 0; c < classes; ++c) mean[c] += model[n][c];
        for (auto& v : mean) v /= static_cast<double>(probs.size());

        std::size_t pick = 0;
        if (mode == EnsembleMode::avg) {
            pick = argmax(mean);
        } else {
            std::vector<std::size_t> votes(classes, 0);
            for (const auto& model : probs) ++votes[argmax(model[n])];
            const std::size_t top = *std::max_element(votes.begin(), votes.end());
            bool found = false;
            for (std::size_t c = 0; c < classes; ++c) {
                if (votes[c] != top) continue;
                if (!found || mean[c] > mean[pick]) pick = c;
                found = true;
            }
        }
        if (static_cast<int>(pick) == labels[n]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(N);
}

}  // namespace consensus
