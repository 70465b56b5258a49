#pragma once

// Dataset manifests and the on-disk explanation store.
//
// Store layout under a root directory:
//   segments/<sample_id>.attr             int32 labels, rank 2
//   segments/<sample_id>.png              16-bit label image (for viewing)
//   <method>/<model_id>/<sample_id>.attr  float32 attribution map
//   consensus/<method>/<sample_id>.attr   float32 consensus map
//   results/                              CSV and JSON outputs
// A model whose manifest entry names an `explanations` directory is read
// from <dir>/<method>/<sample_id>.attr instead.

#include <nlohmann/json.hpp>

#include <cctype>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "consensus/backend.hpp"
#include "consensus/consensus.hpp"
#include "consensus/error.hpp"
#include "consensus/image.hpp"
#include "consensus/io.hpp"
#include "consensus/remote.hpp"
#include "consensus/store.hpp"
#include "consensus/tables.hpp"

namespace consensus {

using json = nlohmann::json;

struct SampleEntry {
    std::string id;
    fs::path image;
    std::optional<fs::path> mask;
    std::optional<int> label;
};

enum class BackendKind { synthetic_box, linear, process, tcp, none };

struct BackendSpec {
    BackendKind kind = BackendKind::none;
    // synthetic_box
    Box box;
    double sharpness = 10.0;
    std::vector<Cue> distractors;
    // linear: one weight image per class
    std::vector<fs::path> class_weights;
    // process
    std::vector<std::string> command;
    // tcp
    std::string host;
    int port = 0;
    std::uint64_t timeout_ms = static_cast<std::uint64_t>(kDefaultTimeout.count());
    std::size_t batch_cap = 32;
};

struct ModelEntry {
    std::string id;
    BackendSpec backend;
    std::optional<fs::path> explanations;
};

struct Manifest {
    fs::path path;
    fs::path base_dir;
    json dataset = json::object();
    std::vector<SampleEntry> samples;
    /// Labeled images used only for accuracy, never explained.
    std::vector<SampleEntry> holdout;
    std::vector<ModelEntry> models;
    std::optional<fs::path> store;

    const ModelEntry& model(const std::string& id) const {
        for (const auto& m : models)
            if (m.id == id) return m;
        fail(ErrorCode::InvalidArgument, "manifest has no model '" + id + "'");
    }
    std::vector<std::string> model_ids() const {
        std::vector<std::string> out;
        for (const auto& m : models) out.push_back(m.id);
        return out;
    }
    std::vector<std::string> sample_ids() const {
        std::vector<std::string> out;
        for (const auto& s : samples) out.push_back(s.id);
        return out;
    }
};

/// Ids become file names, so they are restricted to a portable alphabet.
inline void check_id(const std::string& id, const std::string& what) {
    require(!id.empty() && id.size() <= 128, ErrorCode::InvalidArgument, what + " id must have 1 to 128 characters");
    require(id.front() != '.', ErrorCode::InvalidArgument, what + " id '" + id + "' may not start with '.'");
    for (unsigned char ch : id)
        require(std::isalnum(ch) || ch == '_' || ch == '-' || ch == '.', ErrorCode::InvalidArgument,
                what + " id '" + id + "' contains characters outside [A-Za-z0-9._-]");
}

namespace detail {

inline const json& need(const json& j, const char* key, const std::string& where) {
    require(j.is_object() && j.contains(key), ErrorCode::SchemaMismatch, where + ": missing '" + key + "'");
    return j.at(key);
}

inline Box parse_box(const json& j, const std::string& where) {
    require(j.is_array() && j.size() == 4, ErrorCode::SchemaMismatch, where + ": box must be [x0, y0, x1, y1]");
    return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
}

inline json box_json(const Box& b) { return json::array({b.x0, b.y0, b.x1, b.y1}); }

inline fs::path resolve(const fs::path& base, const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() ? path : base / path;
}

inline BackendSpec parse_backend(const json& j, const fs::path& base, const std::string& where) {
    BackendSpec b;
    const std::string type = need(j, "type", where).get<std::string>();
    if (j.contains("timeout_ms")) b.timeout_ms = j["timeout_ms"].get<std::uint64_t>();
    if (j.contains("batch_cap")) b.batch_cap = j["batch_cap"].get<std::size_t>();
    if (type == "synthetic_box") {
        b.kind = BackendKind::synthetic_box;
        b.box = parse_box(need(j, "box", where), where);
        if (j.contains("sharpness")) b.sharpness = j["sharpness"].get<double>();
        if (j.contains("distractors"))
            for (const auto& d : j["distractors"])
                b.distractors.push_back({parse_box(need(d, "box", where), where), need(d, "weight", where).get<double>()});
    } else if (type == "linear") {
        b.kind = BackendKind::linear;
        for (const auto& p : need(j, "class_weights", where)) b.class_weights.push_back(resolve(base, p.get<std::string>()));
        require(b.class_weights.size() >= 2, ErrorCode::SchemaMismatch, where + ": a linear model needs two or more classes");
    } else if (type == "process") {
        b.kind = BackendKind::process;
        b.command = need(j, "command", where).get<std::vector<std::string>>();
        require(!b.command.empty(), ErrorCode::SchemaMismatch, where + ": empty command");
    } else if (type == "tcp") {
        b.kind = BackendKind::tcp;
        b.host = need(j, "host", where).get<std::string>();
        b.port = need(j, "port", where).get<int>();
    } else {
        fail(ErrorCode::SchemaMismatch, where + ": unknown backend type '" + type + "'");
    }
    return b;
}

inline json backend_json(const BackendSpec& b) {
    json j;
    switch (b.kind) {
        case BackendKind::synthetic_box: {
            j = {{"type", "synthetic_box"}, {"box", box_json(b.box)}, {"sharpness", b.sharpness}};
            json ds = json::array();
            for (const auto& d : b.distractors) ds.push_back({{"box", box_json(d.box)}, {"weight", d.weight}});
            if (!ds.empty()) j["distractors"] = ds;
            break;
        }
        case BackendKind::linear: {
            j = {{"type", "linear"}};
            json ws = json::array();
            for (const auto& p : b.class_weights) ws.push_back(p.string());
            j["class_weights"] = ws;
            break;
        }
        case BackendKind::process: j = {{"type", "process"}, {"command", b.command}}; break;
        case BackendKind::tcp: j = {{"type", "tcp"}, {"host", b.host}, {"port", b.port}}; break;
        case BackendKind::none: return nullptr;
    }
    return j;
}

}  // namespace detail

/// Parses a manifest. Relative paths resolve against `base_dir`. When
/// `check_paths` is set every referenced file must exist.
inline Manifest parse_manifest(const std::string& text, const fs::path& base_dir, bool check_paths = true,
                               const std::string& source = "<manifest>") {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        fail(ErrorCode::ParseError, source + ": " + e.what());
    }
    Manifest m;
    m.base_dir = base_dir;
    try {
        if (j.contains("dataset")) m.dataset = j["dataset"];
        if (j.contains("store")) m.store = detail::resolve(base_dir, j["store"].get<std::string>());
        std::set<std::string> seen;
        for (const auto& s : detail::need(j, "samples", source)) {
            SampleEntry e;
            e.id = detail::need(s, "id", source + " sample").get<std::string>();
            check_id(e.id, "sample");
            require(seen.insert(e.id).second, ErrorCode::InvalidArgument, source + ": duplicate sample id '" + e.id + "'");
            e.image = detail::resolve(base_dir, detail::need(s, "image", source + " sample '" + e.id + "'").get<std::string>());
            if (s.contains("mask") && !s["mask"].is_null()) e.mask = detail::resolve(base_dir, s["mask"].get<std::string>());
            if (s.contains("label") && !s["label"].is_null()) e.label = s["label"].get<int>();
            m.samples.push_back(std::move(e));
        }
        if (j.contains("holdout"))
            for (const auto& s : j["holdout"]) {
                SampleEntry e;
                e.id = detail::need(s, "id", source + " holdout").get<std::string>();
                check_id(e.id, "holdout");
                require(seen.insert(e.id).second, ErrorCode::InvalidArgument, source + ": duplicate sample id '" + e.id + "'");
                const std::string where = source + " holdout '" + e.id + "'";
                e.image = detail::resolve(base_dir, detail::need(s, "image", where).get<std::string>());
                e.label = detail::need(s, "label", where).get<int>();
                m.holdout.push_back(std::move(e));
            }
        seen.clear();
        for (const auto& mj : detail::need(j, "models", source)) {
            ModelEntry e;
            e.id = detail::need(mj, "id", source + " model").get<std::string>();
            check_id(e.id, "model");
            require(e.id != kConsensusRowId, ErrorCode::InvalidArgument, source + ": model id 'consensus' is reserved");
            require(seen.insert(e.id).second, ErrorCode::InvalidArgument, source + ": duplicate model id '" + e.id + "'");
            const std::string where = source + " model '" + e.id + "'";
            if (mj.contains("backend") && !mj["backend"].is_null())
                e.backend = detail::parse_backend(mj["backend"], base_dir, where);
            if (mj.contains("explanations") && !mj["explanations"].is_null())
                e.explanations = detail::resolve(base_dir, mj["explanations"].get<std::string>());
            require(e.backend.kind != BackendKind::none || e.explanations, ErrorCode::SchemaMismatch,
                    where + ": needs a backend or an explanations directory");
            m.models.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        fail(ErrorCode::SchemaMismatch, source + ": " + e.what());
    }
    require(!m.samples.empty(), ErrorCode::EmptyDataset, source + ": no samples");
    require(!m.models.empty(), ErrorCode::EmptyCommittee, source + ": no models");
    if (check_paths) {
        auto exists = [](const fs::path& p, const std::string& what) {
            require(fs::exists(p), ErrorCode::Io, what + " '" + p.string() + "' does not exist");
        };
        for (const auto& s : m.samples) {
            exists(s.image, "image of sample '" + s.id + "'");
            if (s.mask) exists(*s.mask, "mask of sample '" + s.id + "'");
        }
        for (const auto& s : m.holdout) exists(s.image, "image of holdout '" + s.id + "'");
        for (const auto& mo : m.models) {
            if (mo.explanations) exists(*mo.explanations, "explanations of model '" + mo.id + "'");
            for (const auto& w : mo.backend.class_weights) exists(w, "weights of model '" + mo.id + "'");
        }
    }
    return m;
}

inline Manifest load_manifest(const fs::path& path, bool check_paths = true) {
    Manifest m = parse_manifest(read_text(path), fs::absolute(path).parent_path(), check_paths, path.string());
    m.path = path;
    return m;
}

/// Paths are written relative to `base_dir` when they lie below it.
inline json manifest_json(const Manifest& m) {
    auto rel = [&](const fs::path& p) {
        const auto r = p.lexically_relative(m.base_dir);
        return (!r.empty() && *r.begin() != "..") ? r.generic_string() : p.generic_string();
    };
    json j;
    j["dataset"] = m.dataset;
    if (m.store) j["store"] = rel(*m.store);
    j["samples"] = json::array();
    for (const auto& s : m.samples) {
        json e{{"id", s.id}, {"image", rel(s.image)}};
        if (s.mask) e["mask"] = rel(*s.mask);
        if (s.label) e["label"] = *s.label;
        j["samples"].push_back(e);
    }
    if (!m.holdout.empty()) {
        j["holdout"] = json::array();
        for (const auto& s : m.holdout) j["holdout"].push_back({{"id", s.id}, {"image", rel(s.image)}, {"label", *s.label}});
    }
    j["models"] = json::array();
    for (const auto& mo : m.models) {
        json e{{"id", mo.id}};
        if (mo.backend.kind != BackendKind::none) {
            e["backend"] = detail::backend_json(mo.backend);
            if (mo.backend.kind == BackendKind::linear) {
                json ws = json::array();
                for (const auto& p : mo.backend.class_weights) ws.push_back(rel(p));
                e["backend"]["class_weights"] = ws;
            }
        }
        if (mo.explanations) e["explanations"] = rel(*mo.explanations);
        j["models"].push_back(e);
    }
    return j;
}

inline void write_manifest(const fs::path& path, const Manifest& m) { write_text_atomic(path, manifest_json(m).dump(2) + "\n"); }

/// Opens a backend for a manifest model. `input_shape` is needed by the
/// in-process models; remote models report their own.
inline std::unique_ptr<ModelBackend> open_backend(const ModelEntry& m, const Shape& input_shape) {
    const auto& b = m.backend;
    switch (b.kind) {
        case BackendKind::synthetic_box:
            return std::make_unique<SyntheticBoxModel>(m.id, input_shape, b.box, b.sharpness, 1, b.distractors);
        case BackendKind::linear: {
            std::vector<Image> ws;
            for (const auto& p : b.class_weights) ws.push_back(read_image(p));
            return std::make_unique<LinearModel>(m.id, std::move(ws));
        }
        case BackendKind::process:
            return std::make_unique<RemoteBackend>(std::make_unique<ProcessChannel>(b.command), Millis(b.timeout_ms),
                                                   b.batch_cap);
        case BackendKind::tcp:
            return std::make_unique<RemoteBackend>(std::make_unique<TcpChannel>(b.host, b.port), Millis(b.timeout_ms),
                                                   b.batch_cap);
        case BackendKind::none: break;
    }
    fail(ErrorCode::CapabilityMissing, "model '" + m.id + "' has no backend");
}

// ---------------------------------------------------------------------------
// Store paths
// ---------------------------------------------------------------------------

struct StoreLayout {
    fs::path root;

    fs::path segment_file(const std::string& sample) const { return root / "segments" / (sample + ".attr"); }
    fs::path segment_png(const std::string& sample) const { return root / "segments" / (sample + ".png"); }
    fs::path consensus_file(VoteMode mode, const std::string& sample) const {
        return root / "consensus" / to_string(mode) / (sample + ".attr");
    }
    fs::path results_dir() const { return root / "results"; }
    fs::path result(const std::string& name) const { return results_dir() / name; }

    fs::path explanation_file(const ModelEntry& model, VoteMode mode, const std::string& sample) const {
        if (model.explanations) return *model.explanations / to_string(mode) / (sample + ".attr");
        return root / to_string(mode) / model.id / (sample + ".attr");
    }
};

inline StoreLayout store_layout(const Manifest& m, const std::optional<fs::path>& override_root) {
    if (override_root) return {*override_root};
    if (m.store) return {*m.store};
    return {m.base_dir / "store"};
}

inline Granularity granularity_of(VoteMode mode) {
    return mode == VoteMode::lime ? Granularity::superpixel : Granularity::pixel;
}

/// Loads stored explanations for `model_ids` (all manifest models when
/// empty) over every manifest sample.
inline ExplanationStore load_store(const Manifest& m, const StoreLayout& layout, VoteMode mode,
                                   std::vector<std::string> model_ids = {}) {
    if (model_ids.empty()) model_ids = m.model_ids();
    ExplanationStore s;
    s.mode = mode;
    s.granularity = granularity_of(mode);
    s.model_ids = model_ids;
    s.sample_ids = m.sample_ids();
    s.segmentations.assign(s.samples(), std::nullopt);
    if (s.granularity == Granularity::superpixel)
        for (std::size_t n = 0; n < s.samples(); ++n) {
            const auto seg = layout.segment_file(s.sample_ids[n]);
            require(fs::exists(seg), ErrorCode::Io,
                    "segmentation '" + seg.string() + "' is missing; run the segment subcommand first");
            s.segmentations[n] = read_labels(seg);
        }
    s.values.resize(s.models());
    for (std::size_t j = 0; j < s.models(); ++j) {
        const auto& model = m.model(model_ids[j]);
        for (std::size_t n = 0; n < s.samples(); ++n) {
            const auto path = layout.explanation_file(model, mode, s.sample_ids[n]);
            require(fs::exists(path), ErrorCode::Io, "explanation '" + path.string() + "' is missing");
            auto map = read_attr(path);
            if (s.granularity == Granularity::superpixel)
                require(map.values.size() == static_cast<std::size_t>(s.segmentations[n]->num_segments),
                        ErrorCode::DimensionMismatch,
                        path.string() + " has " + std::to_string(map.values.size()) + " values but the segmentation has " +
                            std::to_string(s.segmentations[n]->num_segments) + " segments");
            s.values[j].push_back(std::move(map.values));
        }
    }
    return s;
}

inline std::vector<SegmentationMask> load_masks(const Manifest& m) {
    std::vector<SegmentationMask> out;
    for (const auto& s : m.samples) {
        require(s.mask.has_value(), ErrorCode::InvalidArgument, "sample '" + s.id + "' has no mask");
        out.push_back(load_mask(*s.mask));
    }
    return out;
}

}  // namespace consensus
