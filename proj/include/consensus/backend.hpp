#pragma once

// Black-box model access.
//
// ModelBackend is what the interpreters talk to. RemoteBackend (remote.hpp)
// forwards calls over the wire protocol; the synthetic models below run
// in-process and are deterministic, which makes them the ground truth for
// tests and desk-scale experiments.

#include <algorithm>
#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "consensus/error.hpp"
#include "consensus/image.hpp"
#include "consensus/numeric.hpp"

namespace consensus {

struct BackendDescriptor {
    std::string model_id;
    bool can_predict = true;
    bool can_gradient = false;
    int num_classes = 2;
    Shape input_shape;

    friend bool operator==(const BackendDescriptor&, const BackendDescriptor&) = default;
};

inline void validate(const BackendDescriptor& d) {
    require(!d.model_id.empty(), ErrorCode::ProtocolError, "backend model_id is empty");
    require(d.num_classes >= 2, ErrorCode::ProtocolError, "backend must expose at least 2 classes");
    require(d.can_predict || d.can_gradient, ErrorCode::ProtocolError, "backend declares no capabilities");
    require(d.input_shape.height >= 1 && d.input_shape.width >= 1 && d.input_shape.channels >= 1,
            ErrorCode::ProtocolError, "backend input shape must be positive");
}

class ModelBackend {
public:
    virtual ~ModelBackend() = default;

    virtual const BackendDescriptor& descriptor() const = 0;

    /// Class-probability vectors, one per image.
    virtual std::vector<std::vector<double>> predict_batch(std::span<const Image> images) = 0;

    /// d(logit of target_class) / d(input), shaped like the input.
    virtual Image gradient(const Image& image, int target_class) = 0;

    const std::string& model_id() const { return descriptor().model_id; }
    int num_classes() const { return descriptor().num_classes; }

    std::vector<double> predict(const Image& image) {
        auto out = predict_batch(std::span<const Image>(&image, 1));
        return std::move(out.front());
    }

protected:
    void check_input(const Image& img) const {
        require(img.shape == descriptor().input_shape, ErrorCode::ShapeMismatch,
                "model '" + model_id() + "' expects " + to_string(descriptor().input_shape) + ", got " +
                    to_string(img.shape));
    }
    void check_class(int target_class) const {
        require(target_class >= 0 && target_class < num_classes(), ErrorCode::InvalidArgument,
                "target class " + std::to_string(target_class) + " out of range for model '" + model_id() + "'");
    }
};

inline std::vector<double> softmax(std::span<const double> logits) {
    const double hi = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - hi);
        total += p[i];
    }
    for (auto& v : p) v /= total;
    return p;
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

/// A synthetic differentiable classifier: probabilities are the softmax of
/// closed-form logits whose input gradient is also known in closed form.
class SyntheticBackend : public ModelBackend {
public:
    explicit SyntheticBackend(BackendDescriptor d) : desc_(std::move(d)) {
        desc_.can_predict = true;
        desc_.can_gradient = true;
        validate(desc_);
    }

    const BackendDescriptor& descriptor() const override { return desc_; }

    virtual std::vector<double> logits(const Image& image) const = 0;
    virtual Image logit_gradient(const Image& image, int target_class) const = 0;

    std::vector<std::vector<double>> predict_batch(std::span<const Image> images) override {
        std::vector<std::vector<double>> out;
        out.reserve(images.size());
        for (const auto& img : images) {
            check_input(img);
            out.push_back(softmax(logits(img)));
        }
        return out;
    }

    Image gradient(const Image& image, int target_class) override {
        check_input(image);
        check_class(target_class);
        return logit_gradient(image, target_class);
    }

private:
    BackendDescriptor desc_;
};

/// Axis-aligned pixel rectangle, half-open: rows [y0, y1), cols [x0, x1).
struct Box {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    int area() const { return (x1 - x0) * (y1 - y0); }
    bool contains(int r, int c) const { return r >= y0 && r < y1 && c >= x0 && c < x1; }
    friend bool operator==(const Box&, const Box&) = default;
};

/// A weighted rectangle a box model looks at.
struct Cue {
    Box box;
    double weight = 1.0;
};

/// Two-class detector of a bright region: the positive-class logit is
/// sharpness * (weighted mean intensity over the cues - 0.5); the other
/// logit is 0, so P(positive) = sigmoid(that logit). The first cue is the
/// detector's box; further cues are spurious regions the model also uses.
class SyntheticBoxModel final : public SyntheticBackend {
public:
    SyntheticBoxModel(std::string model_id, Shape input_shape, Box box, double sharpness, int positive_class = 1,
                      std::vector<Cue> distractors = {})
        : SyntheticBackend(BackendDescriptor{std::move(model_id), true, true, 2, input_shape}),
          sharpness_(sharpness),
          positive_(positive_class) {
        cues_.push_back({box, 1.0});
        cues_.insert(cues_.end(), distractors.begin(), distractors.end());
        for (const auto& cue : cues_) {
            const Box& b = cue.box;
            require(b.x0 >= 0 && b.y0 >= 0 && b.x1 <= input_shape.width && b.y1 <= input_shape.height,
                    ErrorCode::InvalidArgument, "box lies outside the input");
            require(b.x0 < b.x1 && b.y0 < b.y1, ErrorCode::InvalidArgument, "box is empty");
            require(cue.weight > 0.0, ErrorCode::InvalidArgument, "cue weights must be positive");
            total_weight_ += cue.weight;
        }
        require(sharpness > 0.0, ErrorCode::InvalidArgument, "sharpness must be positive");
        require(positive_class == 0 || positive_class == 1, ErrorCode::InvalidArgument, "positive class must be 0 or 1");
    }

    const Box& box() const { return cues_.front().box; }
    const std::vector<Cue>& cues() const { return cues_; }
    double sharpness() const { return sharpness_; }
    int positive_class() const { return positive_; }

    static double region_mean(const Image& image, const Box& b) {
        KahanSum acc;
        for (int r = b.y0; r < b.y1; ++r)
            for (int c = b.x0; c < b.x1; ++c)
                for (int ch = 0; ch < image.channels(); ++ch) acc.add(image.at(r, c, ch));
        return acc.value() / (static_cast<double>(b.area()) * image.channels());
    }

    double box_mean(const Image& image) const {
        KahanSum acc;
        for (const auto& cue : cues_) acc.add(cue.weight * region_mean(image, cue.box));
        return acc.value() / total_weight_;
    }

    std::vector<double> logits(const Image& image) const override {
        std::vector<double> z(2, 0.0);
        z[static_cast<std::size_t>(positive_)] = sharpness_ * (box_mean(image) - 0.5);
        return z;
    }

    Image logit_gradient(const Image& image, int target_class) const override {
        Image g(image.height(), image.width(), image.channels(), 0.0);
        if (target_class != positive_) return g;
        for (const auto& cue : cues_) {
            const Box& b = cue.box;
            const double v = sharpness_ * cue.weight / (total_weight_ * b.area() * image.channels());
            for (int r = b.y0; r < b.y1; ++r)
                for (int c = b.x0; c < b.x1; ++c)
                    for (int ch = 0; ch < image.channels(); ++ch) g.at(r, c, ch) += v;
        }
        return g;
    }

private:
    std::vector<Cue> cues_;
    double sharpness_;
    int positive_;
    double total_weight_ = 0.0;
};

/// logit_k = <w_k, x>; gradient of class k is w_k everywhere.
class LinearModel final : public SyntheticBackend {
public:
    LinearModel(std::string model_id, std::vector<Image> class_weights)
        : SyntheticBackend(BackendDescriptor{std::move(model_id), true, true,
                                             static_cast<int>(class_weights.size()),
                                             class_weights.empty() ? Shape{} : class_weights.front().shape}),
          weights_(std::move(class_weights)) {
        for (const auto& w : weights_)
            require(w.shape == weights_.front().shape, ErrorCode::InvalidArgument, "class weights differ in shape");
    }

    std::vector<double> logits(const Image& image) const override {
        std::vector<double> z;
        z.reserve(weights_.size());
        for (const auto& w : weights_) z.push_back(dot(w.data, image.data));
        return z;
    }

    Image logit_gradient(const Image&, int target_class) const override {
        return weights_[static_cast<std::size_t>(target_class)];
    }

private:
    std::vector<Image> weights_;
};

/// Two-class model whose target-class probability is an affine function of
/// which superpixels of a reference image are intact:
///   p = intercept + sum_k coefficient_k * z_k,
/// where z_k = 1 iff every pixel of segment k equals the reference.
/// Predict-only; used to check that LIME recovers known coefficients.
class AffineSegmentModel final : public ModelBackend {
public:
    AffineSegmentModel(std::string model_id, Image reference, SuperpixelSegmentation segmentation, double intercept,
                       std::vector<double> coefficients, int target_class = 1)
        : desc_{std::move(model_id), true, false, 2, reference.shape},
          reference_(std::move(reference)),
          seg_(std::move(segmentation)),
          intercept_(intercept),
          coef_(std::move(coefficients)),
          target_(target_class) {
        require(coef_.size() == static_cast<std::size_t>(seg_.num_segments), ErrorCode::InvalidArgument,
                "one coefficient per segment required");
        require(target_class == 0 || target_class == 1, ErrorCode::InvalidArgument, "target class must be 0 or 1");
    }

    const BackendDescriptor& descriptor() const override { return desc_; }

    std::vector<bool> present_segments(const Image& image) const {
        std::vector<bool> present(coef_.size(), true);
        const auto C = static_cast<std::size_t>(image.channels());
        for (std::size_t p = 0; p < seg_.labels.size(); ++p) {
            const auto k = static_cast<std::size_t>(seg_.labels[p]);
            if (!present[k]) continue;
            for (std::size_t ch = 0; ch < C; ++ch)
                if (image.data[p * C + ch] != reference_.data[p * C + ch]) {
                    present[k] = false;
                    break;
                }
        }
        return present;
    }

    std::vector<std::vector<double>> predict_batch(std::span<const Image> images) override {
        std::vector<std::vector<double>> out;
        out.reserve(images.size());
        for (const auto& img : images) {
            check_input(img);
            const auto z = present_segments(img);
            double p = intercept_;
            for (std::size_t k = 0; k < z.size(); ++k)
                if (z[k]) p += coef_[k];
            std::vector<double> probs(2);
            probs[static_cast<std::size_t>(target_)] = p;
            probs[static_cast<std::size_t>(1 - target_)] = 1.0 - p;
            out.push_back(std::move(probs));
        }
        return out;
    }

    Image gradient(const Image&, int) override {
        fail(ErrorCode::CapabilityMissing, "model '" + desc_.model_id + "' does not provide gradients");
    }

private:
    BackendDescriptor desc_;
    Image reference_;
    SuperpixelSegmentation seg_;
    double intercept_;
    std::vector<double> coef_;
    int target_;
};

}  // namespace consensus
