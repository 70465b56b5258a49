#pragma once

// Committee voting and consensus scores.
//
// A committee of m models explains one sample each; the m explanations form
// an ExplanationMatrix. Voting normalizes every row and averages the rows
// into the consensus. Each model is then scored by the similarity of its own
// explanation to the consensus, averaged over the dataset.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "consensus/error.hpp"
#include "consensus/image.hpp"
#include "consensus/numeric.hpp"

namespace consensus {

enum class VoteMode { lime, smoothgrad };

inline std::string to_string(VoteMode m) { return m == VoteMode::lime ? "lime" : "smoothgrad"; }

inline VoteMode parse_vote_mode(const std::string& s) {
    if (s == "lime") return VoteMode::lime;
    if (s == "smoothgrad" || s == "sg") return VoteMode::smoothgrad;
    fail(ErrorCode::InvalidArgument, "unknown interpreter mode '" + s + "'");
}

/// Explanations of one sample by every committee member (one row per model).
struct ExplanationMatrix {
    std::string sample_id;
    std::vector<std::string> model_ids;
    std::vector<std::vector<double>> rows;
    Granularity granularity = Granularity::superpixel;
    /// Identifies the shared segmentation for superpixel explanations.
    std::optional<std::string> segmentation_ref;
    /// Segment count of that segmentation, when known, for validation.
    std::optional<int> segment_count;

    std::size_t models() const { return rows.size(); }
    std::size_t features() const { return rows.empty() ? 0 : rows.front().size(); }
};

inline void validate(const ExplanationMatrix& L) {
    require(!L.rows.empty(), ErrorCode::EmptyCommittee, "sample '" + L.sample_id + "' has no explanations");
    require(L.model_ids.size() == L.rows.size(), ErrorCode::InvalidArgument,
            "sample '" + L.sample_id + "': model id count does not match row count");
    const std::size_t K = L.rows.front().size();
    require(K >= 1, ErrorCode::InvalidArgument, "sample '" + L.sample_id + "': explanations are empty");
    for (const auto& row : L.rows)
        require(row.size() == K, ErrorCode::DimensionMismatch,
                "sample '" + L.sample_id + "': explanation rows differ in length");
    std::set<std::string> ids(L.model_ids.begin(), L.model_ids.end());
    require(ids.size() == L.model_ids.size(), ErrorCode::InvalidArgument,
            "sample '" + L.sample_id + "': duplicate model ids");
    if (L.granularity == Granularity::superpixel) {
        require(L.segmentation_ref.has_value(), ErrorCode::InvalidArgument,
                "sample '" + L.sample_id + "': superpixel explanations need a segmentation reference");
        if (L.segment_count)
            require(static_cast<std::size_t>(*L.segment_count) == K, ErrorCode::DimensionMismatch,
                    "sample '" + L.sample_id + "': K=" + std::to_string(K) + " but segmentation has " +
                        std::to_string(*L.segment_count) + " segments");
    }
}

/// v_k = row_k^2 / ||row||_2. The entries sum to ||row||_2.
inline std::vector<double> normalize_lime_row(std::span<const double> row) {
    require(!row.empty(), ErrorCode::InvalidArgument, "empty explanation row");
    const double n = norm2(row);
    require(n > 0.0, ErrorCode::ZeroVector, "explanation row is all zeros");
    std::vector<double> out(row.size());
    for (std::size_t k = 0; k < row.size(); ++k) out[k] = row[k] * row[k] / n;
    return out;
}

/// Min-max rescaling onto [0, 1].
inline std::vector<double> normalize_minmax_row(std::span<const double> row) {
    require(!row.empty(), ErrorCode::InvalidArgument, "empty explanation row");
    const auto [lo_it, hi_it] = std::minmax_element(row.begin(), row.end());
    const double lo = *lo_it;
    const double range = *hi_it - lo;
    require(range > 0.0, ErrorCode::ConstantVector, "explanation row is constant");
    std::vector<double> out(row.size());
    for (std::size_t k = 0; k < row.size(); ++k) out[k] = (row[k] - lo) / range;
    return out;
}

inline std::vector<double> normalize_row(std::span<const double> row, VoteMode mode) {
    return mode == VoteMode::lime ? normalize_lime_row(row) : normalize_minmax_row(row);
}

inline bool is_degenerate(const ErrorCode code) {
    return code == ErrorCode::ZeroVector || code == ErrorCode::ConstantVector;
}

struct ConsensusMap {
    std::string sample_id;
    VoteMode mode = VoteMode::lime;
    std::vector<double> values;
};

/// Consensus plus the bookkeeping of which rows took part in the vote.
struct Vote {
    ConsensusMap consensus;
    std::vector<bool> voted;  ///< voted[i] is false when row i was degenerate
    std::size_t voters = 0;
};

/// Mean of a column of contributions. The values are sorted before the
/// compensated sum so the result is bit-identical under any row permutation.
inline double order_free_mean(std::vector<double>& column) {
    std::sort(column.begin(), column.end());
    return compensated_sum(column) / static_cast<double>(column.size());
}

/// Normalizes each row per `mode` and averages the normalized rows.
/// Degenerate rows (all-zero for LIME, constant for SmoothGrad) are dropped.
inline Vote vote(const ExplanationMatrix& L, VoteMode mode) {
    validate(L);
    const std::size_t m = L.models();
    const std::size_t K = L.features();

    Vote out;
    out.voted.assign(m, false);
    std::vector<std::vector<double>> normalized;
    normalized.reserve(m);
    for (std::size_t i = 0; i < m; ++i) {
        try {
            normalized.push_back(normalize_row(L.rows[i], mode));
            out.voted[i] = true;
        } catch (const Error& e) {
            if (!is_degenerate(e.code())) throw;
        }
    }
    out.voters = normalized.size();
    require(out.voters > 0, ErrorCode::EmptyCommittee,
            "sample '" + L.sample_id + "': every explanation is degenerate");

    out.consensus.sample_id = L.sample_id;
    out.consensus.mode = mode;
    out.consensus.values.resize(K);
    std::vector<double> column(out.voters);
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t i = 0; i < out.voters; ++i) column[i] = normalized[i][k];
        out.consensus.values[k] = order_free_mean(column);
    }
    return out;
}

inline ConsensusMap vote_consensus(const ExplanationMatrix& L, VoteMode mode) { return vote(L, mode).consensus; }

// ---------------------------------------------------------------------------
// Similarity
// ---------------------------------------------------------------------------

enum class SimilarityMetric { cosine, rbf };

inline std::string to_string(SimilarityMetric m) { return m == SimilarityMetric::cosine ? "cosine" : "rbf"; }

inline SimilarityMetric parse_metric(const std::string& s) {
    if (s == "cosine") return SimilarityMetric::cosine;
    if (s == "rbf") return SimilarityMetric::rbf;
    fail(ErrorCode::InvalidArgument, "unknown similarity metric '" + s + "'");
}

struct SimilarityConfig {
    SimilarityMetric metric = SimilarityMetric::cosine;
    /// RBF bandwidth; unset means sqrt(K) / 10.
    std::optional<double> sigma;

    double sigma_for(std::size_t K) const {
        const double s = sigma.value_or(std::sqrt(static_cast<double>(K)) / 10.0);
        require(s > 0.0 && std::isfinite(s), ErrorCode::InvalidArgument, "RBF sigma must be positive");
        return s;
    }
};

inline SimilarityConfig default_similarity(VoteMode mode) {
    return {mode == VoteMode::lime ? SimilarityMetric::cosine : SimilarityMetric::rbf, std::nullopt};
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    require(a.size() == b.size(), ErrorCode::DimensionMismatch, "cosine similarity of vectors of unequal length");
    const double na = norm2(a);
    const double nb = norm2(b);
    require(na > 0.0 && nb > 0.0, ErrorCode::ZeroVector, "cosine similarity with a zero vector");
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

/// exp(-0.5 * (||a - b|| / sigma)^2)
inline double rbf_similarity(std::span<const double> a, std::span<const double> b, double sigma) {
    require(a.size() == b.size(), ErrorCode::DimensionMismatch, "RBF similarity of vectors of unequal length");
    require(sigma > 0.0, ErrorCode::InvalidArgument, "RBF sigma must be positive");
    KahanSum acc;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc.add(d * d);
    }
    const double dist = std::sqrt(acc.value());
    const double z = dist / sigma;
    return std::exp(-0.5 * z * z);
}

/// Similarity of one raw explanation row to a consensus. Under RBF both
/// operands are min-max normalized first; a constant consensus is compared
/// as is.
inline double similarity_to_consensus(std::span<const double> row, std::span<const double> consensus,
                                      const SimilarityConfig& cfg) {
    if (cfg.metric == SimilarityMetric::cosine) return cosine_similarity(row, consensus);
    const auto a = normalize_minmax_row(row);
    std::vector<double> b(consensus.begin(), consensus.end());
    try {
        b = normalize_minmax_row(consensus);
    } catch (const Error& e) {
        if (e.code() != ErrorCode::ConstantVector) throw;
    }
    return rbf_similarity(a, b, cfg.sigma_for(row.size()));
}

// ---------------------------------------------------------------------------
// Consensus scores
// ---------------------------------------------------------------------------

struct ConsensusScoreTable {
    std::vector<std::string> model_ids;
    std::vector<std::string> sample_ids;
    /// Average similarity per model over the samples where it voted; NaN
    /// when it never voted.
    std::vector<double> scores;
    /// per_sample[j][n]; NaN where model j was dropped from sample n's vote.
    std::vector<std::vector<double>> per_sample;
    std::vector<std::size_t> voted_samples;
    VoteMode mode = VoteMode::lime;
    SimilarityConfig metric;
};

/// Reorders rows of `L` to follow `order`. Throws MismatchedCommittee if
/// the sets of model ids differ.
inline ExplanationMatrix align_committee(const ExplanationMatrix& L, const std::vector<std::string>& order) {
    if (L.model_ids == order) return L;
    require(L.model_ids.size() == order.size(), ErrorCode::MismatchedCommittee,
            "sample '" + L.sample_id + "' has a different committee");
    ExplanationMatrix out = L;
    for (std::size_t j = 0; j < order.size(); ++j) {
        const auto it = std::find(L.model_ids.begin(), L.model_ids.end(), order[j]);
        require(it != L.model_ids.end(), ErrorCode::MismatchedCommittee,
                "sample '" + L.sample_id + "' lacks model '" + order[j] + "'");
        const auto src = static_cast<std::size_t>(it - L.model_ids.begin());
        out.rows[j] = L.rows[src];
        out.model_ids[j] = order[j];
    }
    return out;
}

inline ConsensusScoreTable score_committee(std::span<const ExplanationMatrix> explanations, VoteMode mode,
                                           const SimilarityConfig& config, std::size_t workers = 1) {
    require(!explanations.empty(), ErrorCode::EmptyDataset, "no samples to score");
    ConsensusScoreTable table;
    table.model_ids = explanations.front().model_ids;
    table.mode = mode;
    table.metric = config;
    const std::size_t m = table.model_ids.size();
    const std::size_t N = explanations.size();
    const double missing = std::numeric_limits<double>::quiet_NaN();
    table.per_sample.assign(m, std::vector<double>(N, missing));
    table.sample_ids.resize(N);

    parallel_for(N, workers, [&](std::size_t n) {
        const ExplanationMatrix L = align_committee(explanations[n], table.model_ids);
        const Vote v = vote(L, mode);
        table.sample_ids[n] = L.sample_id;
        for (std::size_t j = 0; j < m; ++j) {
            if (!v.voted[j]) continue;
            table.per_sample[j][n] = similarity_to_consensus(L.rows[j], v.consensus.values, config);
        }
    });

    table.scores.resize(m);
    table.voted_samples.resize(m);
    for (std::size_t j = 0; j < m; ++j) {
        std::vector<double> present;
        for (double s : table.per_sample[j])
            if (!std::isnan(s)) present.push_back(s);
        table.voted_samples[j] = present.size();
        table.scores[j] = present.empty() ? missing : order_free_mean(present);
    }
    return table;
}

}  // namespace consensus
