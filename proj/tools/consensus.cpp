// consensus: command-line driver for segmentation, explanation, voting,
// scoring and evaluation over a dataset manifest.

#include <CLI11.hpp>

#include <atomic>
#include <cstdio>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "consensus/consensus.hpp"
#include "consensus/evaluation.hpp"
#include "consensus/experiments.hpp"
#include "consensus/interpreters.hpp"
#include "consensus/io.hpp"
#include "consensus/manifest.hpp"
#include "consensus/superpixel.hpp"
#include "consensus/tables.hpp"

namespace {

using namespace consensus;

enum Exit { kOk = 0, kUsage = 1, kInput = 2, kBackend = 3, kInternal = 4 };

int exit_code_for(ErrorCode code) {
    switch (code) {
        case ErrorCode::BackendFailure:
        case ErrorCode::CapabilityMissing:
        case ErrorCode::ProtocolError:
        case ErrorCode::Timeout:
        case ErrorCode::VersionMismatch:
        case ErrorCode::ShapeMismatch: return kBackend;
        case ErrorCode::SingularSystem: return kInternal;
        default: return kInput;
    }
}

bool g_quiet = false;

void info(const std::string& msg) {
    static std::mutex m;
    if (g_quiet) return;
    std::lock_guard lock(m);
    std::cerr << "consensus: " << msg << "\n";
}

/// Raised by commands that already know which model failed.
struct ModelFailure : Error {
    ModelFailure(const std::string& model, const Error& e)
        : Error(e.code(), "model '" + model + "': " + e.what()) {}
};

struct Common {
    std::string manifest;
    std::string store;
    std::uint64_t seed = 0;
    std::size_t workers = 1;
    bool force = false;
};

void add_common(CLI::App* app, Common& c, bool needs_manifest = true) {
    auto* opt = app->add_option("-m,--manifest", c.manifest, "Dataset manifest (JSON)");
    if (needs_manifest) opt->required()->check(CLI::ExistingFile);
    app->add_option("--store", c.store, "Explanation store root (default: manifest 'store' or <manifest dir>/store)");
    app->add_option("--seed", c.seed, "Seed for every random choice")->capture_default_str();
    app->add_option("-j,--workers", c.workers, "Worker threads")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_flag("--force", c.force, "Overwrite existing outputs");
}

Manifest open_manifest(const Common& c) { return load_manifest(c.manifest); }

StoreLayout open_layout(const Manifest& m, const Common& c) {
    return store_layout(m, c.store.empty() ? std::nullopt : std::optional<fs::path>(c.store));
}

/// Refuses to overwrite unless --force, naming the conflicting files.
void guard_outputs(const std::vector<fs::path>& outputs, bool force) {
    if (force) return;
    std::vector<fs::path> conflicts;
    for (const auto& p : outputs)
        if (fs::exists(p)) conflicts.push_back(p);
    if (conflicts.empty()) return;
    std::ostringstream msg;
    msg << conflicts.size() << " output file(s) already exist; rerun with --force to overwrite:";
    for (std::size_t i = 0; i < conflicts.size() && i < 20; ++i) msg << "\n  " << conflicts[i].string();
    if (conflicts.size() > 20) msg << "\n  ...";
    fail(ErrorCode::Io, msg.str());
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ','))
        if (!trim(item).empty()) out.push_back(trim(item));
    return out;
}

// ---------------------------------------------------------------------------
// segment
// ---------------------------------------------------------------------------

struct SegmentArgs {
    Common common;
    QuickshiftParams params;
};

int cmd_segment(const SegmentArgs& a) {
    validate(a.params);
    const auto m = open_manifest(a.common);
    const auto layout = open_layout(m, a.common);
    std::vector<fs::path> outputs;
    for (const auto& s : m.samples) {
        outputs.push_back(layout.segment_file(s.id));
        outputs.push_back(layout.segment_png(s.id));
    }
    guard_outputs(outputs, a.common.force);
    std::atomic<std::size_t> total_segments{0};
    parallel_for(m.samples.size(), a.common.workers, [&](std::size_t n) {
        const auto& s = m.samples[n];
        const auto seg = quickshift(read_image(s.image), a.params);
        write_labels(layout.segment_file(s.id), seg);
        write_labels_png(layout.segment_png(s.id), seg);
        total_segments += static_cast<std::size_t>(seg.num_segments);
    });
    info("mean segments per sample: " + format_number(static_cast<double>(total_segments) / m.samples.size()));
    std::cout << m.samples.size() << " segmented\n";
    return kOk;
}

// ---------------------------------------------------------------------------
// explain
// ---------------------------------------------------------------------------

struct ExplainArgs {
    Common common;
    std::string method = "lime";
    std::string models;
    std::string target = "label";
    LimeConfig lime;
    std::string fill = "segment_mean";
    SmoothGradConfig sg;
    double noise_sigma = -1.0;
    bool no_magnitude = false;
};

int target_for(const ExplainArgs& a, const SampleEntry& s, ModelBackend& model, const Image& img) {
    if (a.target == "label" && s.label) return *s.label;
    if (a.target == "label" || a.target == "predicted") return static_cast<int>(argmax(model.predict(img)));
    try {
        return std::stoi(a.target);
    } catch (const std::exception&) {
        fail(ErrorCode::InvalidArgument, "--target must be 'label', 'predicted' or a class index");
    }
}

int cmd_explain(ExplainArgs a) {
    const VoteMode mode = parse_vote_mode(a.method);
    a.lime.fill = parse_fill(a.fill);
    if (a.noise_sigma >= 0.0) a.sg.noise_sigma = a.noise_sigma;
    a.sg.magnitude = !a.no_magnitude;
    const auto m = open_manifest(a.common);
    const auto layout = open_layout(m, a.common);
    std::vector<std::string> ids = a.models.empty() ? m.model_ids() : split_list(a.models);

    std::vector<const ModelEntry*> models;
    std::vector<fs::path> outputs;
    for (const auto& id : ids) {
        const auto& entry = m.model(id);
        require(entry.backend.kind != BackendKind::none, ErrorCode::InvalidArgument,
                "model '" + id + "' has stored explanations only and cannot be explained");
        models.push_back(&entry);
        for (const auto& s : m.samples) outputs.push_back(layout.explanation_file(entry, mode, s.id));
    }
    guard_outputs(outputs, a.common.force);

    std::vector<Image> images;
    std::vector<std::optional<SuperpixelSegmentation>> segs(m.samples.size());
    for (std::size_t n = 0; n < m.samples.size(); ++n) {
        images.push_back(read_image(m.samples[n].image));
        if (mode == VoteMode::lime) {
            const auto path = layout.segment_file(m.samples[n].id);
            require(fs::exists(path), ErrorCode::Io, "segmentation '" + path.string() + "' is missing; run segment first");
            segs[n] = read_labels(path);
        }
    }
    const std::uint64_t stage_seed = derive_seed(a.common.seed, "explain/" + to_string(mode));

    for (const auto* entry : models) {
        info("explaining with model '" + entry->id + "'");
        try {
            ConnectionPool pool([&] { return open_backend(*entry, images.front().shape); },
                                std::min(a.common.workers, m.samples.size()));
            parallel_for(m.samples.size(), a.common.workers, [&](std::size_t n) {
                auto model = pool.lease();
                const auto& s = m.samples[n];
                const int target = target_for(a, s, *model, images[n]);
                const std::uint64_t seed = derive_seed(stage_seed, entry->id + "/" + s.id);
                AttributionMap map;
                if (mode == VoteMode::lime) {
                    LimeConfig cfg = a.lime;
                    cfg.rng_seed = seed;
                    map = lime_explain(images[n], *segs[n], *model, target, cfg);
                } else {
                    SmoothGradConfig cfg = a.sg;
                    cfg.rng_seed = seed;
                    map = smoothgrad_explain(images[n], *model, target, cfg);
                }
                write_attr(layout.explanation_file(*entry, mode, s.id), map);
            });
        } catch (const Error& e) {
            throw ModelFailure(entry->id, e);
        }
    }
    std::cout << models.size() * m.samples.size() << " explained\n";
    return kOk;
}

// ---------------------------------------------------------------------------
// consensus / score / eval-ap
// ---------------------------------------------------------------------------

struct StoreArgs {
    Common common;
    std::string method = "lime";
    std::string models;
    std::string metric;
    double sigma = -1.0;
};

ExplanationStore open_store(const StoreArgs& a, const Manifest& m, const StoreLayout& layout) {
    return load_store(m, layout, parse_vote_mode(a.method), split_list(a.models));
}

SimilarityConfig similarity_of(const StoreArgs& a, VoteMode mode) {
    SimilarityConfig cfg = default_similarity(mode);
    if (!a.metric.empty()) cfg.metric = parse_metric(a.metric);
    if (a.sigma > 0.0) cfg.sigma = a.sigma;
    return cfg;
}

int cmd_consensus(const StoreArgs& a) {
    const auto m = open_manifest(a.common);
    const auto layout = open_layout(m, a.common);
    const auto store = open_store(a, m, layout);
    std::vector<fs::path> outputs;
    for (const auto& id : store.sample_ids) outputs.push_back(layout.consensus_file(store.mode, id));
    guard_outputs(outputs, a.common.force);

    std::vector<Vote> votes(store.samples());
    parallel_for(store.samples(), a.common.workers, [&](std::size_t n) {
        votes[n] = vote(store.matrix(n, store.all_models()), store.mode);
        AttributionMap map;
        map.values = votes[n].consensus.values;
        if (store.granularity == Granularity::superpixel)
            map.dims = {static_cast<std::uint32_t>(map.values.size())};
        else
            map.dims = read_attr(layout.explanation_file(m.model(store.model_ids.front()), store.mode, store.sample_ids[n])).dims;
        write_attr(layout.consensus_file(store.mode, store.sample_ids[n]), map);
    });
    std::string csv = "sample_id,voters,dropped\n";
    for (std::size_t n = 0; n < store.samples(); ++n) {
        std::string dropped;
        for (std::size_t j = 0; j < store.models(); ++j)
            if (!votes[n].voted[j]) dropped += (dropped.empty() ? "" : ";") + store.model_ids[j];
        csv += store.sample_ids[n] + "," + std::to_string(votes[n].voters) + "," + dropped + "\n";
    }
    write_text_atomic(layout.result("consensus_" + a.method + ".csv"), csv);
    std::cout << store.samples() << " consensus maps\n";
    return kOk;
}

int cmd_score(const StoreArgs& a) {
    const auto m = open_manifest(a.common);
    const auto layout = open_layout(m, a.common);
    const auto store = open_store(a, m, layout);
    const auto cfg = similarity_of(a, store.mode);
    const auto table = score_committee(store.matrices(store.all_models()), store.mode, cfg, a.common.workers);

    std::string csv = "model_id,score,voted_samples\n";
    for (std::size_t j = 0; j < table.model_ids.size(); ++j)
        csv += table.model_ids[j] + "," + format_number(table.scores[j]) + "," + std::to_string(table.voted_samples[j]) + "\n";
    write_text_atomic(layout.result("scores_" + to_string(store.mode) + ".csv"), csv);

    std::string per = "sample_id";
    for (const auto& id : table.model_ids) per += "," + id;
    per += "\n";
    for (std::size_t n = 0; n < table.sample_ids.size(); ++n) {
        per += table.sample_ids[n];
        for (std::size_t j = 0; j < table.model_ids.size(); ++j) per += "," + format_number(table.per_sample[j][n]);
        per += "\n";
    }
    write_text_atomic(layout.result("scores_" + to_string(store.mode) + "_per_sample.csv"), per);
    std::cout << csv;
    return kOk;
}

int cmd_eval_ap(const StoreArgs& a) {
    const auto m = open_manifest(a.common);
    const auto layout = open_layout(m, a.common);
    const auto store = open_store(a, m, layout);
    const auto masks = load_masks(m);

    auto row = [&](const std::string& id, const std::vector<std::vector<double>>& maps) {
        const auto r = mean_ap(maps, masks);
        return id + "," + format_number(r.map) + "," + std::to_string(r.skipped) + "\n";
    };
    std::string csv = "id,map,skipped\n";
    for (std::size_t j = 0; j < store.models(); ++j) {
        std::vector<std::vector<double>> maps;
        for (std::size_t n = 0; n < store.samples(); ++n) maps.push_back(store.to_pixels(n, store.values[j][n]));
        csv += row(store.model_ids[j], maps);
    }
    std::vector<std::vector<double>> cmaps;
    for (std::size_t n = 0; n < store.samples(); ++n) {
        const auto path = layout.consensus_file(store.mode, store.sample_ids[n]);
        const auto values = fs::exists(path) && a.models.empty()
                                ? read_attr(path).values
                                : vote_consensus(store.matrix(n, store.all_models()), store.mode).values;
        cmaps.push_back(store.to_pixels(n, values));
    }
    csv += row(kConsensusRowId, cmaps);
    write_text_atomic(layout.result("map_" + to_string(store.mode) + ".csv"), csv);
    std::cout << csv;
    return kOk;
}

// ---------------------------------------------------------------------------
// ensemble / report
// ---------------------------------------------------------------------------

int cmd_ensemble(const Common& c, const std::string& models_arg) {
    const auto m = open_manifest(c);
    const auto layout = open_layout(m, c);
    std::vector<Image> images;
    std::vector<int> labels;
    for (const auto* list : {&m.samples, &m.holdout})
        for (const auto& s : *list) {
            if (!s.label) continue;
            images.push_back(read_image(s.image));
            labels.push_back(*s.label);
        }
    require(!images.empty(), ErrorCode::EmptyDataset, "no labeled samples in the manifest");
    const auto ids = models_arg.empty() ? m.model_ids() : split_list(models_arg);
    std::vector<std::vector<std::vector<double>>> probs;
    for (const auto& id : ids) {
        try {
            probs.push_back(open_backend(m.model(id), images.front().shape)->predict_batch(images));
        } catch (const Error& e) {
            throw ModelFailure(id, e);
        }
    }
    std::string csv = "id,performance\n";
    for (std::size_t j = 0; j < ids.size(); ++j)
        csv += ids[j] + "," + format_number(ensemble_accuracy({probs[j]}, labels, EnsembleMode::avg)) + "\n";
    const double avg = ensemble_accuracy(probs, labels, EnsembleMode::avg);
    const double vote_acc = ensemble_accuracy(probs, labels, EnsembleMode::vote);
    csv += std::string(kConsensusRowId) + "," + format_number(avg) + "\n";
    write_text_atomic(layout.result("performance.csv"), csv);
    json j{{"samples", labels.size()}, {"models", ids}, {"avg", avg}, {"vote", vote_acc}};
    write_text_atomic(layout.result("ensemble.json"), j.dump(2) + "\n");
    std::cout << csv << "ensemble avg " << format_number(avg) << ", vote " << format_number(vote_acc) << "\n";
    return kOk;
}

/// Reads a two-column (id, value) result CSV into a map.
std::map<std::string, double> read_result_column(const fs::path& path, const std::string& id_col, const std::string& col) {
    std::map<std::string, double> out;
    if (!fs::exists(path)) return out;
    const auto t = read_csv(path);
    const auto ic = t.column_index({id_col});
    const auto vc = t.column_index({col});
    for (const auto& r : t.rows) out[r[ic]] = parse_cell(r[vc], path.string()).value_or(std::nan(""));
    return out;
}

int cmd_report(const Common& c) {
    const auto m = open_manifest(c);
    const auto layout = open_layout(m, c);
    const auto perf = read_result_column(layout.result("performance.csv"), "id", "performance");
    const auto sl = read_result_column(layout.result("scores_lime.csv"), "model_id", "score");
    const auto ss = read_result_column(layout.result("scores_smoothgrad.csv"), "model_id", "score");
    const auto ml = read_result_column(layout.result("map_lime.csv"), "id", "map");
    const auto ms = read_result_column(layout.result("map_smoothgrad.csv"), "id", "map");
    require(!perf.empty() || !sl.empty() || !ss.empty() || !ml.empty() || !ms.empty(), ErrorCode::Io,
            "no results under '" + layout.results_dir().string() + "'; run ensemble, score or eval-ap first");
    auto get = [](const std::map<std::string, double>& col, const std::string& id) {
        const auto it = col.find(id);
        return it == col.end() ? std::nan("") : it->second;
    };
    ResultTable table;
    auto make = [&](const std::string& id) {
        return ModelResultRow{id, get(perf, id), get(sl, id), get(ss, id), get(ml, id), get(ms, id)};
    };
    for (const auto& id : m.model_ids()) table.models.push_back(make(id));
    table.consensus = make(kConsensusRowId);
    const std::string csv = report_csv(table);
    write_text_atomic(layout.result("report.csv"), csv);

    auto num = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
    json rows = json::array();
    for (const auto* r : {&table.models}) {
        for (const auto& x : *r)
            rows.push_back({{"id", x.model_id}, {"performance", num(x.performance)}, {"consensus_score_lime", num(x.score_lime)},
                            {"consensus_score_sg", num(x.score_sg)}, {"map_lime", num(x.map_lime)}, {"map_sg", num(x.map_sg)}});
    }
    const auto& cr = *table.consensus;
    json j{{"models", rows},
           {"consensus", {{"performance", num(cr.performance)}, {"map_lime", num(cr.map_lime)}, {"map_sg", num(cr.map_sg)}}}};
    const auto ens = layout.result("ensemble.json");
    if (fs::exists(ens)) j["ensemble"] = json::parse(read_text(ens));
    write_text_atomic(layout.result("report.json"), j.dump(2) + "\n");
    std::cout << csv;
    return kOk;
}

// ---------------------------------------------------------------------------
// correlate
// ---------------------------------------------------------------------------

struct CorrelateArgs {
    std::string table;
    std::string x, y;
    std::string method = "pearson";
    bool include_consensus = false;
    bool json_out = false;
};

int cmd_correlate(const CorrelateArgs& a) {
    const auto t = read_csv(a.table);
    const auto [xs, ys] = paired_columns(t, a.x, a.y, a.include_consensus);
    const auto r = correlate(xs, ys, parse_correlation_method(a.method));
    if (a.json_out) {
        std::cout << json{{"x", a.x}, {"y", a.y}, {"method", a.method}, {"r", r.r}, {"p", r.p_value}, {"n", r.n}}.dump()
                  << "\n";
    } else {
        char buf[160];
        std::snprintf(buf, sizeof buf, "r=%.6f p=%.6g n=%zu", r.r, r.p_value, r.n);
        std::cout << buf << "\n";
    }
    return kOk;
}

// ---------------------------------------------------------------------------
// robustness / convergence
// ---------------------------------------------------------------------------

std::string join(const std::vector<std::string>& v, char sep) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? std::string(1, sep) : "") + v[i];
    return out;
}

struct RobustnessArgs {
    StoreArgs store;
    std::string targets;
    std::string reference;
    std::size_t min_extras = 10, max_extras = 20, trials = 20;
};

int cmd_robustness(const RobustnessArgs& a) {
    const auto m = open_manifest(a.store.common);
    const auto layout = open_layout(m, a.store.common);
    const auto store = open_store(a.store, m, layout);
    const auto cfg = similarity_of(a.store, store.mode);
    CommitteeSpec spec;
    spec.target_ids = split_list(a.targets);
    require(!spec.target_ids.empty(), ErrorCode::InvalidArgument, "--targets is empty");
    spec.min_extras = a.min_extras;
    spec.max_extras = a.max_extras;
    spec.n_trials = a.trials;
    spec.rng_seed = derive_seed(a.store.common.seed, "robustness");

    std::vector<double> reference;
    if (!a.reference.empty()) {
        const auto col = read_result_column(a.reference, "model_id", "score");
        for (const auto& id : spec.target_ids) {
            const auto it = col.find(id);
            require(it != col.end(), ErrorCode::InvalidArgument, "reference table has no score for '" + id + "'");
            reference.push_back(it->second);
        }
    } else {
        const auto full = score_committee(store.matrices(store.all_models()), store.mode, cfg, a.store.common.workers);
        for (const auto& id : spec.target_ids) reference.push_back(full.scores[store.model_index(id)]);
    }
    const auto res = robustness_study(store, spec, reference, cfg);

    std::string csv = "trial,r,committee\n";
    for (std::size_t t = 0; t < res.per_committee_r.size(); ++t)
        csv += std::to_string(t) + "," + format_number(res.per_committee_r[t]) + "," + join(res.committees[t], ';') + "\n";
    write_text_atomic(layout.result("robustness_" + to_string(store.mode) + ".csv"), csv);
    auto num = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
    json j{{"targets", spec.target_ids}, {"trials", spec.n_trials}, {"mean_r", num(res.mean_r)},
           {"std_r", num(res.std_r)}, {"failures", res.failures}};
    write_text_atomic(layout.result("robustness_" + to_string(store.mode) + ".json"), j.dump(2) + "\n");
    for (const auto& f : res.failures) info(f);
    std::cout << "mean_r=" << format_number(res.mean_r) << " std_r=" << format_number(res.std_r) << " trials=" << spec.n_trials
              << "\n";
    return kOk;
}

struct ConvergenceArgs {
    StoreArgs store;
    std::string sizes;
    std::size_t trials = 20;
    std::string metric = "map";
};

int cmd_convergence(const ConvergenceArgs& a) {
    const auto m = open_manifest(a.store.common);
    const auto layout = open_layout(m, a.store.common);
    const auto store = open_store(a.store, m, layout);
    const auto metric = parse_convergence_metric(a.metric);
    std::vector<std::size_t> sizes;
    if (a.sizes.empty())
        for (std::size_t s = 1; s <= store.models(); ++s) sizes.push_back(s);
    else
        for (const auto& s : split_list(a.sizes)) {
            try {
                sizes.push_back(static_cast<std::size_t>(std::stoul(s)));
            } catch (const std::exception&) {
                fail(ErrorCode::InvalidArgument, "bad committee size '" + s + "'");
            }
        }
    std::vector<SegmentationMask> masks;
    if (metric == ConvergenceMetric::map_vs_mask) masks = load_masks(m);
    const auto curve = convergence_study(store, sizes, a.trials, metric, metric == ConvergenceMetric::map_vs_mask ? &masks : nullptr,
                                         derive_seed(a.store.common.seed, "convergence"), similarity_of(a.store, store.mode));

    std::string csv = "size,trial,value,committee\n";
    std::string summary = "size,mean,median\n";
    for (std::size_t i = 0; i < curve.sizes.size(); ++i) {
        for (std::size_t t = 0; t < curve.trials[i].size(); ++t)
            csv += std::to_string(curve.sizes[i]) + "," + std::to_string(t) + "," + format_number(curve.trials[i][t]) + "," +
                   join(curve.committees[i][t], ';') + "\n";
        summary += std::to_string(curve.sizes[i]) + "," + format_number(curve.mean[i]) + "," + format_number(curve.median[i]) + "\n";
    }
    const std::string stem = "convergence_" + to_string(store.mode);
    write_text_atomic(layout.result(stem + ".csv"), csv);
    write_text_atomic(layout.result(stem + "_summary.csv"), summary);
    std::cout << summary;
    return kOk;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthArgs {
    std::string out;
    SyntheticWorldConfig cfg;
    bool force = false;
};

int cmd_synth(const SynthArgs& a) {
    const auto world = make_synthetic_world(a.cfg);
    const fs::path root = a.out;
    Manifest m;
    m.base_dir = root;
    m.store = root / "store";
    m.dataset = {{"name", "synthetic-boxes"},
                 {"image_size", a.cfg.image_size},
                 {"seed", a.cfg.seed},
                 {"jitter", a.cfg.jitter},
                 {"distractor_weight", a.cfg.distractor_weight}};
    std::vector<fs::path> outputs{root / "manifest.json"};
    for (std::size_t n = 0; n < world.images.size(); ++n) {
        SampleEntry s{world.sample_ids[n], root / "images" / (world.sample_ids[n] + ".ppm"),
                      root / "masks" / (world.sample_ids[n] + ".pgm"), 1};
        outputs.push_back(s.image);
        outputs.push_back(*s.mask);
        m.samples.push_back(s);
        SampleEntry h{"negative" + std::to_string(n), root / "images" / ("negative" + std::to_string(n) + ".ppm"), std::nullopt, 0};
        outputs.push_back(h.image);
        m.holdout.push_back(h);
    }
    guard_outputs(outputs, a.force);
    for (std::size_t n = 0; n < world.images.size(); ++n) {
        write_pnm(m.samples[n].image, world.images[n]);
        write_mask_pgm(*m.samples[n].mask, world.masks[n]);
        write_pnm(m.holdout[n].image, world.negatives[n]);
    }
    for (std::size_t j = 0; j < world.model_ids.size(); ++j) {
        ModelEntry e;
        e.id = world.model_ids[j];
        e.backend.kind = BackendKind::synthetic_box;
        e.backend.box = world.model_boxes[j];
        e.backend.sharpness = a.cfg.sharpness;
        e.backend.distractors = world.model_distractors[j];
        m.models.push_back(e);
    }
    write_manifest(root / "manifest.json", m);
    std::cout << world.images.size() << " samples, " << world.model_ids.size() << " models written to " << root.string() << "\n";
    return kOk;
}

void add_store_options(CLI::App* app, StoreArgs& a) {
    add_common(app, a.common);
    app->add_option("--method", a.method, "Interpreter: lime or smoothgrad")
        ->check(CLI::IsMember({"lime", "smoothgrad"}))
        ->capture_default_str();
    app->add_option("--models", a.models, "Comma-separated committee (default: every manifest model)");
    app->add_option("--metric", a.metric, "Similarity: cosine or rbf (default: by method)")
        ->check(CLI::IsMember({"cosine", "rbf"}));
    app->add_option("--sigma", a.sigma, "RBF bandwidth (default: sqrt(K)/10)")->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cross-model consensus of explanations: segment, explain, vote, score and evaluate."};
    app.require_subcommand(1);
    app.add_flag("-q,--quiet", g_quiet, "Suppress progress messages on stderr");
    app.fallthrough();

    SegmentArgs seg;
    auto* segment = app.add_subcommand("segment", "Quickshift superpixels for every sample");
    add_common(segment, seg.common);
    segment->add_option("--ratio", seg.params.ratio, "Color vs. position weight")->capture_default_str();
    segment->add_option("--kernel-size", seg.params.kernel_size, "Density kernel width")->capture_default_str();
    segment->add_option("--max-dist", seg.params.max_dist, "Cut-off for tree links")->capture_default_str();
    segment->add_option("--sigma", seg.params.smoothing_sigma, "Gaussian pre-smoothing")->capture_default_str();

    ExplainArgs ex;
    auto* explain = app.add_subcommand("explain", "Explain every sample with every model");
    add_common(explain, ex.common);
    explain->add_option("--method", ex.method, "Interpreter: lime or smoothgrad")
        ->check(CLI::IsMember({"lime", "smoothgrad"}))
        ->capture_default_str();
    explain->add_option("--models", ex.models, "Comma-separated model ids (default: all)");
    explain->add_option("--target", ex.target, "Class to explain: label, predicted or an index")->capture_default_str();
    explain->add_option("--lime-samples", ex.lime.n_samples, "LIME perturbations")->check(CLI::PositiveNumber)->capture_default_str();
    explain->add_option("--kernel-width", ex.lime.kernel_width, "LIME proximity kernel width")->capture_default_str();
    explain->add_option("--ridge", ex.lime.ridge_lambda, "LIME ridge penalty")->capture_default_str();
    explain->add_option("--fill", ex.fill, "Fill for removed superpixels: segment_mean, zero or gray")
        ->check(CLI::IsMember({"segment_mean", "zero", "gray"}))
        ->capture_default_str();
    explain->add_option("--gray", ex.lime.gray_value, "Gray level for --fill gray")->capture_default_str();
    explain->add_option("--batch", ex.lime.batch_size, "Images per predict call")->check(CLI::PositiveNumber)->capture_default_str();
    explain->add_option("--sg-samples", ex.sg.n_samples, "SmoothGrad noisy copies")->check(CLI::PositiveNumber)->capture_default_str();
    explain->add_option("--noise-frac", ex.sg.noise_sigma_frac, "Noise std as a fraction of the image range")->capture_default_str();
    explain->add_option("--noise-sigma", ex.noise_sigma, "Absolute noise std (overrides --noise-frac)");
    explain->add_flag("--no-magnitude", ex.no_magnitude, "Average signed gradients instead of magnitudes");

    StoreArgs cons;
    auto* consensus_cmd = app.add_subcommand("consensus", "Vote a consensus map per sample");
    add_store_options(consensus_cmd, cons);

    StoreArgs score;
    auto* score_cmd = app.add_subcommand("score", "Consensus score of every committee member");
    add_store_options(score_cmd, score);

    StoreArgs ap;
    auto* ap_cmd = app.add_subcommand("eval-ap", "mAP of each model and of the consensus against the masks");
    add_store_options(ap_cmd, ap);

    Common ens;
    std::string ens_models;
    auto* ens_cmd = app.add_subcommand("ensemble", "Accuracy of each model and of the ensemble");
    add_common(ens_cmd, ens);
    ens_cmd->add_option("--models", ens_models, "Comma-separated model ids (default: all)");

    Common rep;
    auto* report_cmd = app.add_subcommand("report", "Join results into one per-model report");
    add_common(report_cmd, rep);

    CorrelateArgs corr;
    auto* corr_cmd = app.add_subcommand("correlate", "Correlate two columns of a results table");
    corr_cmd->add_option("table", corr.table, "CSV table")->required()->check(CLI::ExistingFile);
    corr_cmd->add_option("-x,--x", corr.x, "First column")->required();
    corr_cmd->add_option("-y,--y", corr.y, "Second column")->required();
    corr_cmd->add_option("--method", corr.method, "pearson or spearman")
        ->check(CLI::IsMember({"pearson", "spearman"}))
        ->capture_default_str();
    corr_cmd->add_flag("--include-consensus", corr.include_consensus, "Keep the 'consensus' row");
    corr_cmd->add_flag("--json", corr.json_out, "Print JSON");

    RobustnessArgs rob;
    auto* rob_cmd = app.add_subcommand("robustness", "Target scores across random committees");
    add_store_options(rob_cmd, rob.store);
    rob_cmd->add_option("--targets", rob.targets, "Comma-separated target model ids")->required();
    rob_cmd->add_option("--reference", rob.reference, "Scores CSV (model_id,score); default: full-pool scores");
    rob_cmd->add_option("--min-extras", rob.min_extras, "Fewest extra members")->capture_default_str();
    rob_cmd->add_option("--max-extras", rob.max_extras, "Most extra members")->capture_default_str();
    rob_cmd->add_option("--trials", rob.trials, "Committees to draw")->capture_default_str();

    ConvergenceArgs conv;
    auto* conv_cmd = app.add_subcommand("convergence", "Metric versus committee size");
    add_store_options(conv_cmd, conv.store);
    conv_cmd->add_option("--sizes", conv.sizes, "Comma-separated committee sizes (default: 1..pool)");
    conv_cmd->add_option("--trials", conv.trials, "Committees per size")->capture_default_str();
    conv_cmd->add_option("--value", conv.metric, "map (consensus mAP) or score (agreement with full-pool scores)")
        ->check(CLI::IsMember({"map", "score"}))
        ->capture_default_str();

    SynthArgs syn;
    auto* synth = app.add_subcommand("synth", "Write the synthetic box world and its manifest");
    synth->add_option("-o,--out", syn.out, "Output directory")->required();
    synth->add_option("--models", syn.cfg.n_models, "Box models")->check(CLI::PositiveNumber)->capture_default_str();
    synth->add_option("--samples", syn.cfg.n_samples, "Images")->check(CLI::PositiveNumber)->capture_default_str();
    synth->add_option("--size", syn.cfg.image_size, "Image side")->capture_default_str();
    synth->add_option("--jitter", syn.cfg.jitter, "Box offset bound, fraction of the object side")->capture_default_str();
    synth->add_option("--distractor-weight", syn.cfg.distractor_weight, "Weight of each model's background cue")->capture_default_str();
    synth->add_option("--sharpness", syn.cfg.sharpness, "Logit slope")->capture_default_str();
    synth->add_option("--seed", syn.cfg.seed, "Seed")->capture_default_str();
    synth->add_flag("--force", syn.force, "Overwrite existing outputs");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kUsage;
    }

    try {
        if (*segment) return cmd_segment(seg);
        if (*explain) return cmd_explain(ex);
        if (*consensus_cmd) return cmd_consensus(cons);
        if (*score_cmd) return cmd_score(score);
        if (*ap_cmd) return cmd_eval_ap(ap);
        if (*ens_cmd) return cmd_ensemble(ens, ens_models);
        if (*report_cmd) return cmd_report(rep);
        if (*corr_cmd) return cmd_correlate(corr);
        if (*rob_cmd) return cmd_robustness(rob);
        if (*conv_cmd) return cmd_convergence(conv);
        if (*synth) return cmd_synth(syn);
    } catch (const Error& e) {
        std::cerr << "consensus: error [" << to_string(e.code()) << "]: " << e.what() << "\n";
        return exit_code_for(e.code());
    } catch (const std::exception& e) {
        std::cerr << "consensus: internal error: " << e.what() << "\n";
        return kInternal;
    }
    return kUsage;
}
