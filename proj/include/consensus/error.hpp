#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace consensus {

enum class ErrorCode {
    InvalidArgument,
    ZeroVector,
    ConstantVector,
    EmptyCommittee,
    MismatchedCommittee,
    InvalidImage,
    DimensionMismatch,
    SingularSystem,
    BackendFailure,
    CapabilityMissing,
    ProtocolError,
    Timeout,
    ShapeMismatch,
    VersionMismatch,
    NoPositives,
    EmptyDataset,
    ZeroVariance,
    TooFewPoints,
    InsufficientPool,
    BadMagic,
    TruncatedFile,
    DimOverflow,
    UnsupportedFormat,
    EmptyMask,
    SchemaMismatch,
    ParseError,
    Io,
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::ZeroVector: return "ZeroVector";
        case ErrorCode::ConstantVector: return "ConstantVector";
        case ErrorCode::EmptyCommittee: return "EmptyCommittee";
        case ErrorCode::MismatchedCommittee: return "MismatchedCommittee";
        case ErrorCode::InvalidImage: return "InvalidImage";
        case ErrorCode::DimensionMismatch: return "DimensionMismatch";
        case ErrorCode::SingularSystem: return "SingularSystem";
        case ErrorCode::BackendFailure: return "BackendFailure";
        case ErrorCode::CapabilityMissing: return "CapabilityMissing";
        case ErrorCode::ProtocolError: return "ProtocolError";
        case ErrorCode::Timeout: return "Timeout";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::VersionMismatch: return "VersionMismatch";
        case ErrorCode::NoPositives: return "NoPositives";
        case ErrorCode::EmptyDataset: return "EmptyDataset";
        case ErrorCode::ZeroVariance: return "ZeroVariance";
        case ErrorCode::TooFewPoints: return "TooFewPoints";
        case ErrorCode::InsufficientPool: return "InsufficientPool";
        case ErrorCode::BadMagic: return "BadMagic";
        case ErrorCode::TruncatedFile: return "TruncatedFile";
        case ErrorCode::DimOverflow: return "DimOverflow";
        case ErrorCode::UnsupportedFormat: return "UnsupportedFormat";
        case ErrorCode::EmptyMask: return "EmptyMask";
        case ErrorCode::SchemaMismatch: return "SchemaMismatch";
        case ErrorCode::ParseError: return "ParseError";
        case ErrorCode::Io: return "Io";
    }
    return "Unknown";
}

/// Every failure raised by the toolkit carries one of the codes above so
/// callers (the CLI in particular) can map it to an exit status.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
    if (!cond) fail(code, what);
}

}  // namespace consensus
