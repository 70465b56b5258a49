#pragma once

// Studies over stored explanations (cross-committee robustness, convergence
// over committee size) and the synthetic box world used to run the whole
// pipeline end to end at desk scale.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "consensus/backend.hpp"
#include "consensus/consensus.hpp"
#include "consensus/evaluation.hpp"
#include "consensus/image.hpp"
#include "consensus/interpreters.hpp"
#include "consensus/numeric.hpp"
#include "consensus/store.hpp"
#include "consensus/superpixel.hpp"
#include "consensus/tables.hpp"

namespace consensus {

inline double sample_stddev(const std::vector<double>& xs) {
    if (xs.size() < 2) return 0.0;
    const double m = compensated_mean(xs);
    KahanSum acc;
    for (double x : xs) acc.add((x - m) * (x - m));
    return std::sqrt(acc.value() / static_cast<double>(xs.size() - 1));
}

inline double median(std::vector<double> xs) {
    if (xs.empty()) return std::nan("");
    std::sort(xs.begin(), xs.end());
    const std::size_t n = xs.size();
    return n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

inline std::vector<double> finite_only(const std::vector<double>& xs) {
    std::vector<double> out;
    for (double x : xs)
        if (std::isfinite(x)) out.push_back(x);
    return out;
}

// ---------------------------------------------------------------------------
// Cross-committee robustness
// ---------------------------------------------------------------------------

struct CommitteeSpec {
    std::vector<std::string> target_ids;
    std::size_t min_extras = 10;
    std::size_t max_extras = 20;
    std::size_t n_trials = 20;
    std::uint64_t rng_seed = 0;
};

struct RobustnessResult {
    double mean_r = std::nan("");
    double std_r = std::nan("");
    std::vector<double> per_committee_r;  ///< NaN where r was undefined
    std::vector<std::vector<std::string>> committees;
    std::vector<std::string> failures;  ///< one entry per failed trial
};

/// Draws one committee: every target plus `extras` distinct non-targets.
inline std::vector<std::size_t> draw_committee(const std::vector<std::size_t>& targets,
                                               const std::vector<std::size_t>& others, std::size_t extras, Rng& rng) {
    std::vector<std::size_t> committee = targets;
    for (auto i : rng.sample_without_replacement(others.size(), extras)) committee.push_back(others[i]);
    return committee;
}

/// For each trial, forms targets + random extras, recomputes the targets'
/// consensus scores inside that committee and correlates them with
/// `reference_scores`.
inline RobustnessResult robustness_study(const ExplanationStore& store, const CommitteeSpec& spec,
                                         const std::vector<double>& reference_scores, const SimilarityConfig& similarity) {
    require(spec.target_ids.size() == reference_scores.size(), ErrorCode::InvalidArgument,
            "one reference score per target required");
    require(spec.min_extras <= spec.max_extras, ErrorCode::InvalidArgument, "extras range is inverted");
    std::vector<std::size_t> targets;
    for (const auto& id : spec.target_ids) {
        const auto it = std::find(store.model_ids.begin(), store.model_ids.end(), id);
        require(it != store.model_ids.end(), ErrorCode::InsufficientPool, "target '" + id + "' is not in the pool");
        targets.push_back(static_cast<std::size_t>(it - store.model_ids.begin()));
    }
    std::vector<std::size_t> others;
    for (std::size_t j = 0; j < store.models(); ++j)
        if (std::find(targets.begin(), targets.end(), j) == targets.end()) others.push_back(j);
    require(spec.max_extras <= others.size(), ErrorCode::InsufficientPool,
            "pool has " + std::to_string(others.size()) + " non-target models, " + std::to_string(spec.max_extras) +
                " extras requested");

    RobustnessResult out;
    for (std::size_t t = 0; t < spec.n_trials; ++t) {
        Rng rng(derive_seed(spec.rng_seed, static_cast<std::uint64_t>(t)));
        const std::size_t extras =
            spec.min_extras + static_cast<std::size_t>(rng.below(spec.max_extras - spec.min_extras + 1));
        const auto committee = draw_committee(targets, others, extras, rng);
        std::vector<std::string> ids;
        for (auto j : committee) ids.push_back(store.model_ids[j]);
        out.committees.push_back(ids);

        double r = std::nan("");
        try {
            const auto table = score_committee(store.matrices(committee), store.mode, similarity);
            std::vector<double> target_scores(table.scores.begin(),
                                              table.scores.begin() + static_cast<std::ptrdiff_t>(targets.size()));
            r = pearson(target_scores, reference_scores).r;
        } catch (const Error& e) {
            out.failures.push_back("trial " + std::to_string(t) + ": " + e.what());
        }
        out.per_committee_r.push_back(r);
    }
    const auto valid = finite_only(out.per_committee_r);
    if (!valid.empty()) {
        out.mean_r = compensated_mean(valid);
        out.std_r = sample_stddev(valid);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convergence over committee size
// ---------------------------------------------------------------------------

enum class ConvergenceMetric { map_vs_mask, score };

inline ConvergenceMetric parse_convergence_metric(const std::string& s) {
    if (s == "map" || s == "map_vs_mask") return ConvergenceMetric::map_vs_mask;
    if (s == "score") return ConvergenceMetric::score;
    fail(ErrorCode::InvalidArgument, "unknown convergence metric '" + s + "'");
}

struct ConvergenceCurve {
    std::vector<std::size_t> sizes;
    std::vector<double> mean;
    std::vector<double> median;
    std::vector<std::vector<double>> trials;  ///< trials[size index][trial]
    std::vector<std::vector<std::vector<std::string>>> committees;
};

/// mAP of the committee's consensus against the masks.
inline double consensus_map(const ExplanationStore& store, const std::vector<std::size_t>& committee,
                            const std::vector<SegmentationMask>& masks) {
    require(masks.size() == store.samples(), ErrorCode::DimensionMismatch, "one mask per sample required");
    std::vector<std::vector<double>> maps;
    maps.reserve(store.samples());
    for (std::size_t n = 0; n < store.samples(); ++n)
        maps.push_back(store.to_pixels(n, vote_consensus(store.matrix(n, committee), store.mode).values));
    return mean_ap(maps, masks).map;
}

/// Pearson r between the committee members' in-committee scores and their
/// scores in the full pool.
inline double score_agreement(const ExplanationStore& store, const std::vector<std::size_t>& committee,
                              const std::vector<double>& full_pool_scores, const SimilarityConfig& similarity) {
    const auto table = score_committee(store.matrices(committee), store.mode, similarity);
    std::vector<double> reference;
    for (auto j : committee) reference.push_back(full_pool_scores[j]);
    return pearson(table.scores, reference).r;
}

inline ConvergenceCurve convergence_study(const ExplanationStore& store, const std::vector<std::size_t>& sizes,
                                          std::size_t n_trials, ConvergenceMetric metric,
                                          const std::vector<SegmentationMask>* masks, std::uint64_t seed,
                                          const SimilarityConfig& similarity) {
    require(metric != ConvergenceMetric::map_vs_mask || masks != nullptr, ErrorCode::InvalidArgument,
            "the mAP metric needs ground-truth masks");
    for (auto s : sizes)
        require(s >= 1 && s <= store.models(), ErrorCode::InsufficientPool,
                "committee size " + std::to_string(s) + " exceeds the pool of " + std::to_string(store.models()));

    std::vector<double> full_scores;
    if (metric == ConvergenceMetric::score)
        full_scores = score_committee(store.matrices(store.all_models()), store.mode, similarity).scores;

    ConvergenceCurve curve;
    curve.sizes = sizes;
    for (auto s : sizes) {
        std::vector<double> values;
        std::vector<std::vector<std::string>> drawn;
        for (std::size_t t = 0; t < n_trials; ++t) {
            Rng rng(derive_seed(derive_seed(seed, static_cast<std::uint64_t>(s)), static_cast<std::uint64_t>(t)));
            const auto committee = rng.sample_without_replacement(store.models(), s);
            std::vector<std::string> ids;
            for (auto j : committee) ids.push_back(store.model_ids[j]);
            drawn.push_back(std::move(ids));
            double v = std::nan("");
            try {
                v = metric == ConvergenceMetric::map_vs_mask ? consensus_map(store, committee, *masks)
                                                             : score_agreement(store, committee, full_scores, similarity);
            } catch (const Error& e) {
                if (e.code() != ErrorCode::TooFewPoints && e.code() != ErrorCode::ZeroVariance) throw;
            }
            values.push_back(v);
        }
        const auto valid = finite_only(values);
        curve.mean.push_back(valid.empty() ? std::nan("") : compensated_mean(valid));
        curve.median.push_back(median(valid));
        curve.trials.push_back(std::move(values));
        curve.committees.push_back(std::move(drawn));
    }
    return curve;
}

// ---------------------------------------------------------------------------
// Synthetic box world
// ---------------------------------------------------------------------------

struct SyntheticWorldConfig {
    int n_models = 8;
    int image_size = 64;
    /// Per-model box offset bound as a fraction of the object side.
    double jitter = 0.25;
    int n_samples = 30;
    std::uint64_t seed = 0;
    /// Object side as a fraction of the image side.
    double object_fraction = 1.0 / 3.0;
    /// Per-image object displacement bound, pixels.
    int object_wobble = 2;
    double sharpness = 10.0;
    /// Base brightness ranges (drawn per image) and texture amplitudes.
    double background_lo = 0.10, background_hi = 0.30, background_texture = 0.25;
    double object_lo = 0.55, object_hi = 0.80, object_texture = 0.20;
    /// Each model also keys on one background patch of this side fraction
    /// (relative to the object side) and weight. Zero weight disables it.
    double distractor_size = 0.5;
    double distractor_weight = 0.8;
    QuickshiftParams segmentation{0.01, 2.0, 3.0, 0.0};
    LimeConfig lime{300, 0.25, 1.0, FillMode::zero, 0.5, 0, 32};
    SmoothGradConfig smoothgrad{4, 0.15, std::nullopt, true, 0};
    bool run_smoothgrad = true;
    std::size_t workers = 1;
};

inline void validate(const SyntheticWorldConfig& c) {
    require(c.n_models >= 1 && c.n_samples >= 1, ErrorCode::InvalidArgument, "model and sample counts must be positive");
    require(c.image_size >= 8, ErrorCode::InvalidArgument, "image size must be at least 8");
    require(c.object_fraction > 0.0 && c.object_fraction < 1.0, ErrorCode::InvalidArgument, "object fraction in (0, 1)");
    require(c.jitter >= 0.0 && c.jitter < 1.0, ErrorCode::InvalidArgument, "jitter must be smaller than the box size");
    require(c.sharpness > 0.0, ErrorCode::InvalidArgument, "sharpness must be positive");
}

struct SyntheticWorld {
    Shape shape;
    Box nominal_object;
    std::vector<std::string> sample_ids;
    std::vector<Image> images;  ///< objects present (label 1)
    std::vector<Box> objects;
    std::vector<SegmentationMask> masks;
    std::vector<Image> negatives;  ///< background only (label 0), for accuracy
    std::vector<Box> model_boxes;
    std::vector<std::vector<Cue>> model_distractors;
    std::vector<std::string> model_ids;

    std::vector<std::unique_ptr<SyntheticBoxModel>> make_models(double sharpness) const {
        std::vector<std::unique_ptr<SyntheticBoxModel>> out;
        for (std::size_t j = 0; j < model_boxes.size(); ++j)
            out.push_back(std::make_unique<SyntheticBoxModel>(model_ids[j], shape, model_boxes[j], sharpness, 1,
                                                              model_distractors[j]));
        return out;
    }
};

namespace detail {

/// Smooth random field rescaled to [0, 1].
inline Image smooth_texture(Rng& rng, int size, int channels, double sigma) {
    Image noise(size, size, channels);
    for (auto& v : noise.data) v = rng.uniform();
    Image t = gaussian_blur(noise, sigma);
    const auto [lo, hi] = std::minmax_element(t.data.begin(), t.data.end());
    const double a = *lo, range = std::max(*hi - *lo, 1e-12);
    for (auto& v : t.data) v = (v - a) / range;
    return t;
}

inline Box shifted(Box b, int dx, int dy, int size) {
    const int w = b.x1 - b.x0, h = b.y1 - b.y0;
    b.x0 = std::clamp(b.x0 + dx, 0, size - w);
    b.y0 = std::clamp(b.y0 + dy, 0, size - h);
    b.x1 = b.x0 + w;
    b.y1 = b.y0 + h;
    return b;
}

inline int uniform_int(Rng& rng, int lo, int hi) {
    return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
}

/// A square background patch that stays clear of the object's wobble range.
inline Box background_patch(Rng& rng, const Box& object, const SyntheticWorldConfig& cfg, int side) {
    const int S = cfg.image_size;
    const int p = std::max(2, static_cast<int>(std::lround(cfg.distractor_size * side)));
    const int margin = cfg.object_wobble;
    for (int attempt = 0; attempt < 1000; ++attempt) {
        const int x0 = uniform_int(rng, 0, S - p), y0 = uniform_int(rng, 0, S - p);
        const Box b{x0, y0, x0 + p, y0 + p};
        const bool clear = b.x1 <= object.x0 - margin || b.x0 >= object.x1 + margin || b.y1 <= object.y0 - margin ||
                           b.y0 >= object.y1 + margin;
        if (clear) return b;
    }
    fail(ErrorCode::InvalidArgument, "no room for a background patch");
}

}  // namespace detail

/// Images with one bright textured square on a darker textured background,
/// plus a committee of box detectors whose boxes are the nominal object
/// displaced by up to `jitter` of its side.
inline SyntheticWorld make_synthetic_world(const SyntheticWorldConfig& cfg) {
    validate(cfg);
    Rng rng(derive_seed(cfg.seed, "synthetic-world"));
    const int S = cfg.image_size;
    const int side = std::max(2, static_cast<int>(std::lround(S * cfg.object_fraction)));
    SyntheticWorld w;
    w.shape = {S, S, 3};
    const int start = (S - side) / 2;
    w.nominal_object = {start, start, start + side, start + side};

    for (int n = 0; n < cfg.n_samples; ++n) {
        const Box obj = detail::shifted(w.nominal_object, detail::uniform_int(rng, -cfg.object_wobble, cfg.object_wobble),
                                        detail::uniform_int(rng, -cfg.object_wobble, cfg.object_wobble), S);
        const double bg_level = rng.uniform(cfg.background_lo, cfg.background_hi);
        const double obj_level = rng.uniform(cfg.object_lo, cfg.object_hi);
        const Image bg = detail::smooth_texture(rng, S, 3, 3.0);
        const Image fg = detail::smooth_texture(rng, S, 3, 2.0);
        Image img(S, S, 3);
        SegmentationMask mask{S, S, std::vector<std::uint8_t>(w.shape.pixels(), 0)};
        for (int r = 0; r < S; ++r)
            for (int c = 0; c < S; ++c) {
                const bool in = obj.contains(r, c);
                mask.foreground[static_cast<std::size_t>(r * S + c)] = in ? 1 : 0;
                for (int ch = 0; ch < 3; ++ch)
                    img.at(r, c, ch) = in ? obj_level + cfg.object_texture * fg.at(r, c, ch)
                                        : bg_level + cfg.background_texture * bg.at(r, c, ch);
            }
        Image neg(S, S, 3);
        const Image bg2 = detail::smooth_texture(rng, S, 3, 3.0);
        const double neg_level = rng.uniform(cfg.background_lo, cfg.background_hi);
        for (std::size_t i = 0; i < neg.data.size(); ++i) neg.data[i] = neg_level + cfg.background_texture * bg2.data[i];

        w.sample_ids.push_back("sample" + std::to_string(n));
        w.images.push_back(std::move(img));
        w.objects.push_back(obj);
        w.masks.push_back(std::move(mask));
        w.negatives.push_back(std::move(neg));
    }

    const int bound = static_cast<int>(std::floor(cfg.jitter * side));
    for (int j = 0; j < cfg.n_models; ++j) {
        const int dx = detail::uniform_int(rng, -bound, bound);
        const int dy = detail::uniform_int(rng, -bound, bound);
        w.model_boxes.push_back(detail::shifted(w.nominal_object, dx, dy, S));
        std::vector<Cue> distractors;
        if (cfg.distractor_weight > 0.0) distractors.push_back({detail::background_patch(rng, w.nominal_object, cfg, side), cfg.distractor_weight});
        w.model_distractors.push_back(std::move(distractors));
        w.model_ids.push_back("box" + std::to_string(j));
    }
    return w;
}

struct SyntheticRun {
    SyntheticWorld world;
    ExplanationStore lime;
    ExplanationStore smoothgrad;
    ResultTable table;  ///< one row per model plus the consensus row
    double ensemble_vote_accuracy = 0.0;
};

/// Accuracy on the world's positives (label 1) and negatives (label 0).
inline std::vector<std::vector<std::vector<double>>> world_predictions(
    const SyntheticWorld& w, const std::vector<std::unique_ptr<SyntheticBoxModel>>& models) {
    std::vector<std::vector<std::vector<double>>> probs;
    for (const auto& m : models) {
        auto p = m->predict_batch(w.images);
        auto q = m->predict_batch(w.negatives);
        p.insert(p.end(), q.begin(), q.end());
        probs.push_back(std::move(p));
    }
    return probs;
}

inline std::vector<int> world_labels(const SyntheticWorld& w) {
    std::vector<int> labels(w.images.size(), 1);
    labels.insert(labels.end(), w.negatives.size(), 0);
    return labels;
}

inline SyntheticRun synthetic_alignment_experiment(const SyntheticWorldConfig& cfg) {
    SyntheticRun run;
    run.world = make_synthetic_world(cfg);
    const auto& w = run.world;
    auto models = w.make_models(cfg.sharpness);
    const std::size_t M = models.size(), N = w.images.size();

    auto init_store = [&](ExplanationStore& s, VoteMode mode, Granularity g) {
        s.mode = mode;
        s.granularity = g;
        s.model_ids = w.model_ids;
        s.sample_ids = w.sample_ids;
        s.values.assign(M, std::vector<std::vector<double>>(N));
        s.segmentations.assign(N, std::nullopt);
    };
    init_store(run.lime, VoteMode::lime, Granularity::superpixel);
    init_store(run.smoothgrad, VoteMode::smoothgrad, Granularity::pixel);

    parallel_for(N, cfg.workers, [&](std::size_t n) {
        const auto seg = quickshift(w.images[n], cfg.segmentation);
        run.lime.segmentations[n] = seg;
        for (std::size_t j = 0; j < M; ++j) {
            LimeConfig lc = cfg.lime;
            lc.rng_seed = derive_seed(derive_seed(cfg.seed, "lime"), static_cast<std::uint64_t>(n * M + j));
            run.lime.values[j][n] = lime_explain(w.images[n], seg, *models[j], 1, lc).values;
            if (cfg.run_smoothgrad) {
                SmoothGradConfig sc = cfg.smoothgrad;
                sc.rng_seed = derive_seed(derive_seed(cfg.seed, "smoothgrad"), static_cast<std::uint64_t>(n * M + j));
                run.smoothgrad.values[j][n] = smoothgrad_explain(w.images[n], *models[j], 1, sc).values;
            }
        }
    });

    const auto probs = world_predictions(w, models);
    const auto labels = world_labels(w);
    const auto all = run.lime.all_models();

    const auto lime_scores = score_committee(run.lime.matrices(all), VoteMode::lime, default_similarity(VoteMode::lime));
    std::optional<ConsensusScoreTable> sg_scores;
    if (cfg.run_smoothgrad)
        sg_scores = score_committee(run.smoothgrad.matrices(all), VoteMode::smoothgrad,
                                    default_similarity(VoteMode::smoothgrad));

    auto model_map = [&](const ExplanationStore& s, std::size_t j) {
        std::vector<std::vector<double>> maps;
        for (std::size_t n = 0; n < N; ++n) maps.push_back(s.to_pixels(n, s.values[j][n]));
        return mean_ap(maps, w.masks).map;
    };

    for (std::size_t j = 0; j < M; ++j) {
        ModelResultRow row;
        row.model_id = w.model_ids[j];
        row.performance = ensemble_accuracy({probs[j]}, labels, EnsembleMode::avg);
        row.score_lime = lime_scores.scores[j];
        row.map_lime = model_map(run.lime, j);
        if (sg_scores) {
            row.score_sg = sg_scores->scores[j];
            row.map_sg = model_map(run.smoothgrad, j);
        }
        run.table.models.push_back(row);
    }
    ModelResultRow cons;
    cons.model_id = kConsensusRowId;
    cons.performance = ensemble_accuracy(probs, labels, EnsembleMode::avg);
    cons.map_lime = consensus_map(run.lime, all, w.masks);
    if (cfg.run_smoothgrad) cons.map_sg = consensus_map(run.smoothgrad, all, w.masks);
    run.table.consensus = cons;
    run.ensemble_vote_accuracy = ensemble_accuracy(probs, labels, EnsembleMode::vote);
    return run;
}

}  // namespace consensus
