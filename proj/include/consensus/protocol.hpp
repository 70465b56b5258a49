#pragma once

// Wire protocol "consensus/1": one JSON object per line.
//
// Requests carry {"id", "kind"} with kind in {"handshake", "predict",
// "gradient"}; responses echo both and add "ok". Tensors travel as
// {"dtype": "f32le", "shape": [...], "data": <base64 of little-endian
// float32>}. docs/protocol.md is the normative description.
//
// Encoding is canonical (keys sorted, no whitespace), so a message decoded
// and re-encoded reproduces its original bytes.

#include <openssl/evp.h>

#include <bit>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "consensus/backend.hpp"
#include "consensus/error.hpp"
#include "consensus/image.hpp"

namespace consensus::protocol {

using json = nlohmann::json;

inline constexpr const char* kVersion = "consensus/1";

// ---------------------------------------------------------------------------
// Tensors
// ---------------------------------------------------------------------------

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
    if (bytes.empty()) return {};
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

inline std::vector<std::uint8_t> base64_decode(const std::string& text) {
    if (text.empty()) return {};
    require(text.size() % 4 == 0, ErrorCode::ProtocolError, "base64 payload length is not a multiple of 4");
    std::vector<std::uint8_t> out(3 * text.size() / 4);
    const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
    require(n >= 0, ErrorCode::ProtocolError, "malformed base64 payload");
    std::size_t pad = 0;
    if (text.back() == '=') ++pad;
    if (text.size() >= 2 && text[text.size() - 2] == '=') ++pad;
    out.resize(static_cast<std::size_t>(n) - pad);
    return out;
}

struct Tensor {
    std::vector<std::uint32_t> shape;
    std::vector<float> data;

    std::size_t expected_size() const {
        std::size_t n = 1;
        for (auto d : shape) n *= d;
        return n;
    }
    friend bool operator==(const Tensor&, const Tensor&) = default;
};

inline json encode_tensor(const Tensor& t) {
    std::vector<std::uint8_t> bytes;
    bytes.reserve(t.data.size() * 4);
    for (float f : t.data) {
        const auto bits = std::bit_cast<std::uint32_t>(f);
        for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
    }
    return json{{"dtype", "f32le"}, {"shape", t.shape}, {"data", base64_encode(bytes)}};
}

inline Tensor decode_tensor(const json& j, const char* field) {
    require(j.is_object(), ErrorCode::ProtocolError, std::string("'") + field + "' is not a tensor object");
    require(j.contains("dtype") && j["dtype"] == "f32le", ErrorCode::ProtocolError,
            std::string("'") + field + "' must have dtype f32le");
    require(j.contains("shape") && j["shape"].is_array(), ErrorCode::ProtocolError,
            std::string("'") + field + "' lacks a shape");
    require(j.contains("data") && j["data"].is_string(), ErrorCode::ProtocolError,
            std::string("'") + field + "' lacks data");
    Tensor t;
    for (const auto& d : j["shape"]) {
        require(d.is_number_unsigned(), ErrorCode::ProtocolError, "tensor dims must be unsigned integers");
        t.shape.push_back(d.get<std::uint32_t>());
    }
    const auto bytes = base64_decode(j["data"].get<std::string>());
    require(bytes.size() % 4 == 0 && bytes.size() / 4 == t.expected_size(), ErrorCode::ProtocolError,
            std::string("'") + field + "' payload does not match its shape");
    t.data.resize(bytes.size() / 4);
    for (std::size_t i = 0; i < t.data.size(); ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[4 * i + b]) << (8 * b);
        t.data[i] = std::bit_cast<float>(bits);
    }
    return t;
}

inline Tensor image_to_tensor(const Image& img) {
    Tensor t;
    t.shape = {static_cast<std::uint32_t>(img.height()), static_cast<std::uint32_t>(img.width()),
               static_cast<std::uint32_t>(img.channels())};
    t.data.assign(img.data.begin(), img.data.end());
    return t;
}

inline Image tensor_to_image(const Tensor& t) {
    require(t.shape.size() == 3, ErrorCode::ShapeMismatch, "image tensor must have rank 3");
    Image img(static_cast<int>(t.shape[0]), static_cast<int>(t.shape[1]), static_cast<int>(t.shape[2]));
    img.data.assign(t.data.begin(), t.data.end());
    return img;
}

inline Tensor images_to_tensor(std::span<const Image> images, const Shape& shape) {
    Tensor t;
    t.shape = {static_cast<std::uint32_t>(images.size()), static_cast<std::uint32_t>(shape.height),
               static_cast<std::uint32_t>(shape.width), static_cast<std::uint32_t>(shape.channels)};
    t.data.reserve(images.size() * shape.size());
    for (const auto& img : images) t.data.insert(t.data.end(), img.data.begin(), img.data.end());
    return t;
}

inline std::vector<Image> tensor_to_images(const Tensor& t) {
    require(t.shape.size() == 4, ErrorCode::ShapeMismatch, "image batch tensor must have rank 4");
    const Shape s{static_cast<int>(t.shape[1]), static_cast<int>(t.shape[2]), static_cast<int>(t.shape[3])};
    std::vector<Image> out;
    out.reserve(t.shape[0]);
    for (std::size_t b = 0; b < t.shape[0]; ++b) {
        Image img(s.height, s.width, s.channels);
        const auto begin = t.data.begin() + static_cast<std::ptrdiff_t>(b * s.size());
        img.data.assign(begin, begin + static_cast<std::ptrdiff_t>(s.size()));
        out.push_back(std::move(img));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Messages
// ---------------------------------------------------------------------------

struct HandshakeRequest {
    std::uint64_t id = 0;
    std::string version = kVersion;
    friend bool operator==(const HandshakeRequest&, const HandshakeRequest&) = default;
};

struct PredictRequest {
    std::uint64_t id = 0;
    Tensor images;  ///< [B, H, W, C]
    friend bool operator==(const PredictRequest&, const PredictRequest&) = default;
};

struct GradientRequest {
    std::uint64_t id = 0;
    Tensor image;  ///< [H, W, C]
    int target_class = 0;
    friend bool operator==(const GradientRequest&, const GradientRequest&) = default;
};

using Request = std::variant<HandshakeRequest, PredictRequest, GradientRequest>;

struct HandshakeResponse {
    std::uint64_t id = 0;
    std::string version = kVersion;
    BackendDescriptor descriptor;
    friend bool operator==(const HandshakeResponse&, const HandshakeResponse&) = default;
};

struct PredictResponse {
    std::uint64_t id = 0;
    Tensor probabilities;  ///< [B, num_classes]
    std::optional<Tensor> logits;
    friend bool operator==(const PredictResponse&, const PredictResponse&) = default;
};

struct GradientResponse {
    std::uint64_t id = 0;
    Tensor gradient;  ///< [H, W, C]
    friend bool operator==(const GradientResponse&, const GradientResponse&) = default;
};

/// Wire error codes.
enum class WireError { bad_request, unsupported_kind, capability_missing, shape_mismatch, version_mismatch, internal };

inline std::string to_string(WireError e) {
    switch (e) {
        case WireError::bad_request: return "bad_request";
        case WireError::unsupported_kind: return "unsupported_kind";
        case WireError::capability_missing: return "capability_missing";
        case WireError::shape_mismatch: return "shape_mismatch";
        case WireError::version_mismatch: return "version_mismatch";
        case WireError::internal: return "internal";
    }
    return "internal";
}

inline WireError parse_wire_error(const std::string& s) {
    for (auto e : {WireError::bad_request, WireError::unsupported_kind, WireError::capability_missing,
                   WireError::shape_mismatch, WireError::version_mismatch, WireError::internal})
        if (to_string(e) == s) return e;
    fail(ErrorCode::ProtocolError, "unknown error code '" + s + "'");
}

struct ErrorResponse {
    std::uint64_t id = 0;
    std::string kind;
    WireError code = WireError::internal;
    std::string message;
    friend bool operator==(const ErrorResponse&, const ErrorResponse&) = default;
};

using Response = std::variant<HandshakeResponse, PredictResponse, GradientResponse, ErrorResponse>;

namespace detail {

inline json parse_line(const std::string& line) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::parse_error& e) {
        fail(ErrorCode::ProtocolError, std::string("malformed JSON: ") + e.what());
    }
    require(j.is_object(), ErrorCode::ProtocolError, "message is not a JSON object");
    return j;
}

inline const json& field(const json& j, const char* name) {
    require(j.contains(name), ErrorCode::ProtocolError, std::string("missing field '") + name + "'");
    return j[name];
}

inline std::uint64_t id_of(const json& j) {
    const auto& v = field(j, "id");
    require(v.is_number_unsigned(), ErrorCode::ProtocolError, "'id' must be an unsigned integer");
    return v.get<std::uint64_t>();
}

inline std::string string_of(const json& j, const char* name) {
    const auto& v = field(j, name);
    require(v.is_string(), ErrorCode::ProtocolError, std::string("'") + name + "' must be a string");
    return v.get<std::string>();
}

inline std::int64_t int_of(const json& j, const char* name) {
    const auto& v = field(j, name);
    require(v.is_number_integer(), ErrorCode::ProtocolError, std::string("'") + name + "' must be an integer");
    return v.get<std::int64_t>();
}

}  // namespace detail

inline std::string encode(const Request& req) {
    json j = std::visit(
        [](const auto& r) -> json {
            using T = std::decay_t<decltype(r)>;
            if constexpr (std::is_same_v<T, HandshakeRequest>)
                return {{"id", r.id}, {"kind", "handshake"}, {"version", r.version}};
            else if constexpr (std::is_same_v<T, PredictRequest>)
                return {{"id", r.id}, {"kind", "predict"}, {"images", encode_tensor(r.images)}};
            else
                return {{"id", r.id}, {"kind", "gradient"}, {"image", encode_tensor(r.image)}, {"target_class", r.target_class}};
        },
        req);
    return j.dump();
}

inline Request decode_request(const std::string& line) {
    const json j = detail::parse_line(line);
    const auto id = detail::id_of(j);
    const auto kind = detail::string_of(j, "kind");
    if (kind == "handshake") return HandshakeRequest{id, detail::string_of(j, "version")};
    if (kind == "predict") return PredictRequest{id, decode_tensor(detail::field(j, "images"), "images")};
    if (kind == "gradient")
        return GradientRequest{id, decode_tensor(detail::field(j, "image"), "image"),
                               static_cast<int>(detail::int_of(j, "target_class"))};
    fail(ErrorCode::ProtocolError, "unknown request kind '" + kind + "'");
}

inline std::string encode(const Response& resp) {
    json j = std::visit(
        [](const auto& r) -> json {
            using T = std::decay_t<decltype(r)>;
            if constexpr (std::is_same_v<T, HandshakeResponse>) {
                json caps = json::array();
                if (r.descriptor.can_predict) caps.push_back("predict");
                if (r.descriptor.can_gradient) caps.push_back("gradient");
                const auto& s = r.descriptor.input_shape;
                return {{"id", r.id},
                        {"kind", "handshake"},
                        {"ok", true},
                        {"version", r.version},
                        {"model_id", r.descriptor.model_id},
                        {"capabilities", caps},
                        {"num_classes", r.descriptor.num_classes},
                        {"input_shape", {s.height, s.width, s.channels}}};
            } else if constexpr (std::is_same_v<T, PredictResponse>) {
                json out{{"id", r.id}, {"kind", "predict"}, {"ok", true}, {"probabilities", encode_tensor(r.probabilities)}};
                if (r.logits) out["logits"] = encode_tensor(*r.logits);
                return out;
            } else if constexpr (std::is_same_v<T, GradientResponse>) {
                return {{"id", r.id}, {"kind", "gradient"}, {"ok", true}, {"gradient", encode_tensor(r.gradient)}};
            } else {
                return {{"id", r.id},
                        {"kind", r.kind},
                        {"ok", false},
                        {"error", {{"code", to_string(r.code)}, {"message", r.message}}}};
            }
        },
        resp);
    return j.dump();
}

inline Response decode_response(const std::string& line) {
    const json j = detail::parse_line(line);
    const auto id = detail::id_of(j);
    const auto kind = detail::string_of(j, "kind");
    const auto& ok = detail::field(j, "ok");
    require(ok.is_boolean(), ErrorCode::ProtocolError, "'ok' must be a boolean");
    if (!ok.get<bool>()) {
        const auto& err = detail::field(j, "error");
        require(err.is_object(), ErrorCode::ProtocolError, "'error' must be an object");
        return ErrorResponse{id, kind, parse_wire_error(detail::string_of(err, "code")), detail::string_of(err, "message")};
    }
    if (kind == "handshake") {
        HandshakeResponse r;
        r.id = id;
        r.version = detail::string_of(j, "version");
        r.descriptor.model_id = detail::string_of(j, "model_id");
        r.descriptor.num_classes = static_cast<int>(detail::int_of(j, "num_classes"));
        const auto& caps = detail::field(j, "capabilities");
        require(caps.is_array(), ErrorCode::ProtocolError, "'capabilities' must be an array");
        r.descriptor.can_predict = r.descriptor.can_gradient = false;
        for (const auto& c : caps) {
            require(c.is_string(), ErrorCode::ProtocolError, "capability names must be strings");
            if (c == "predict")
                r.descriptor.can_predict = true;
            else if (c == "gradient")
                r.descriptor.can_gradient = true;
            else
                fail(ErrorCode::ProtocolError, "unknown capability '" + c.get<std::string>() + "'");
        }
        const auto& shape = detail::field(j, "input_shape");
        require(shape.is_array() && shape.size() == 3, ErrorCode::ProtocolError, "'input_shape' must be [H, W, C]");
        for (const auto& d : shape) require(d.is_number_integer(), ErrorCode::ProtocolError, "input_shape entries must be integers");
        r.descriptor.input_shape = {shape[0].get<int>(), shape[1].get<int>(), shape[2].get<int>()};
        return r;
    }
    if (kind == "predict") {
        PredictResponse r;
        r.id = id;
        r.probabilities = decode_tensor(detail::field(j, "probabilities"), "probabilities");
        if (j.contains("logits")) r.logits = decode_tensor(j["logits"], "logits");
        return r;
    }
    if (kind == "gradient") return GradientResponse{id, decode_tensor(detail::field(j, "gradient"), "gradient")};
    fail(ErrorCode::ProtocolError, "unknown response kind '" + kind + "'");
}

// ---------------------------------------------------------------------------
// Server-side dispatch
// ---------------------------------------------------------------------------

inline ErrorResponse make_error(std::uint64_t id, std::string kind, WireError code, std::string message) {
    return ErrorResponse{id, std::move(kind), code, std::move(message)};
}

/// Answers one request line on behalf of `model`. Never throws; failures
/// become error responses.
inline std::string handle_request_line(ModelBackend& model, const std::string& line, bool include_logits = false) {
    std::uint64_t id = 0;
    std::string kind;
    try {
        const json j = detail::parse_line(line);
        if (j.contains("id") && j["id"].is_number_unsigned()) id = j["id"].get<std::uint64_t>();
        if (j.contains("kind") && j["kind"].is_string()) kind = j["kind"].get<std::string>();
    } catch (const Error& e) {
        return encode(make_error(0, "", WireError::bad_request, e.what()));
    }
    try {
        const Request req = decode_request(line);
        if (const auto* h = std::get_if<HandshakeRequest>(&req)) {
            if (h->version != kVersion)
                return encode(make_error(id, kind, WireError::version_mismatch,
                                         "server speaks " + std::string(kVersion) + ", client sent " + h->version));
            return encode(HandshakeResponse{id, kVersion, model.descriptor()});
        }
        if (const auto* p = std::get_if<PredictRequest>(&req)) {
            if (!model.descriptor().can_predict)
                return encode(make_error(id, kind, WireError::capability_missing, "model cannot predict"));
            const auto images = tensor_to_images(p->images);
            const auto probs = model.predict_batch(images);
            PredictResponse r;
            r.id = id;
            const auto classes = static_cast<std::uint32_t>(model.num_classes());
            r.probabilities.shape = {static_cast<std::uint32_t>(probs.size()), classes};
            for (const auto& v : probs) r.probabilities.data.insert(r.probabilities.data.end(), v.begin(), v.end());
            if (include_logits)
                if (auto* synth = dynamic_cast<SyntheticBackend*>(&model)) {
                    Tensor lt;
                    lt.shape = r.probabilities.shape;
                    for (const auto& img : images) {
                        const auto z = synth->logits(img);
                        lt.data.insert(lt.data.end(), z.begin(), z.end());
                    }
                    r.logits = std::move(lt);
                }
            return encode(r);
        }
        const auto& g = std::get<GradientRequest>(req);
        if (!model.descriptor().can_gradient)
            return encode(make_error(id, kind, WireError::capability_missing, "model does not provide gradients"));
        return encode(GradientResponse{id, image_to_tensor(model.gradient(tensor_to_image(g.image), g.target_class))});
    } catch (const Error& e) {
        WireError code = WireError::bad_request;
        if (e.code() == ErrorCode::ShapeMismatch) code = WireError::shape_mismatch;
        if (e.code() == ErrorCode::CapabilityMissing) code = WireError::capability_missing;
        if (e.code() == ErrorCode::ProtocolError && kind != "handshake" && kind != "predict" && kind != "gradient")
            code = WireError::unsupported_kind;
        return encode(make_error(id, kind, code, e.what()));
    } catch (const std::exception& e) {
        return encode(make_error(id, kind, WireError::internal, e.what()));
    }
}

}  // namespace consensus::protocol
