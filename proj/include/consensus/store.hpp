#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "consensus/consensus.hpp"
#include "consensus/error.hpp"
#include "consensus/image.hpp"

namespace consensus {

/// Explanations of a pool of models over a dataset, held in memory so that
/// studies can form arbitrary committees without re-querying any model.
struct ExplanationStore {
    VoteMode mode = VoteMode::lime;
    Granularity granularity = Granularity::superpixel;
    std::vector<std::string> model_ids;
    std::vector<std::string> sample_ids;
    /// values[model][sample]
    std::vector<std::vector<std::vector<double>>> values;
    /// Per-sample segmentation, required for superpixel explanations.
    std::vector<std::optional<SuperpixelSegmentation>> segmentations;

    std::size_t models() const { return model_ids.size(); }
    std::size_t samples() const { return sample_ids.size(); }

    std::size_t model_index(const std::string& id) const {
        const auto it = std::find(model_ids.begin(), model_ids.end(), id);
        require(it != model_ids.end(), ErrorCode::InvalidArgument, "model '" + id + "' is not in the store");
        return static_cast<std::size_t>(it - model_ids.begin());
    }

    /// The committee's explanations of sample n, rows in `committee` order.
    ExplanationMatrix matrix(std::size_t n, const std::vector<std::size_t>& committee) const {
        ExplanationMatrix L;
        L.sample_id = sample_ids.at(n);
        L.granularity = granularity;
        if (granularity == Granularity::superpixel) {
            L.segmentation_ref = sample_ids[n];
            if (n < segmentations.size() && segmentations[n]) L.segment_count = segmentations[n]->num_segments;
        }
        for (auto j : committee) {
            L.model_ids.push_back(model_ids.at(j));
            L.rows.push_back(values.at(j).at(n));
        }
        return L;
    }

    std::vector<ExplanationMatrix> matrices(const std::vector<std::size_t>& committee) const {
        std::vector<ExplanationMatrix> out;
        out.reserve(samples());
        for (std::size_t n = 0; n < samples(); ++n) out.push_back(matrix(n, committee));
        return out;
    }

    std::vector<std::size_t> all_models() const {
        std::vector<std::size_t> idx(models());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        return idx;
    }

    /// Pixel-level view of a per-sample vector (broadcast through the
    /// segmentation when explanations are per superpixel).
    std::vector<double> to_pixels(std::size_t n, const std::vector<double>& v) const {
        if (granularity == Granularity::pixel) return v;
        require(n < segmentations.size() && segmentations[n].has_value(), ErrorCode::InvalidArgument,
                "sample '" + sample_ids.at(n) + "' has no segmentation");
        return broadcast_to_pixels(v, *segmentations[n]);
    }
};

}  // namespace consensus
