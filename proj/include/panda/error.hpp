#pragma once

#include <stdexcept>
#include <string>

namespace panda {

// Every failure surfaced by the toolkit carries one of these names so that
// callers (and the CLI exit path) can report it without string matching.
enum class ErrorCode {
    // config
    MissingKey,
    OutOfRange,
    UnknownKey,
    // data
    MissingDirectory,
    UndecodableImage,
    EmptyTrainSplit,
    SemiSupervisedViolation,
    UnknownClass,
    EmptySplit,
    // models
    ShapeMismatch,
    UnknownSkipMode,
    NonFiniteLatent,
    // perceptual
    ExtractorNotLoaded,
    FileNotFound,
    ShapeIncompatible,
    MissingExtractor,
    // losses
    DomainError,
    // scoring
    EmptyList,
    InsufficientData,
    // eval
    SingleClassLabels,
    TooFewRuns,
    UnknownFormat,
    // training / checkpoints
    AnomalousTrainingSample,
    NonFiniteLoss,
    VersionMismatch,
    CorruptCheckpoint,
    CheckpointWriteError,
    // misc
    IoError,
    Internal,
};

inline const char* to_string(ErrorCode c) {
    switch (c) {
        case ErrorCode::MissingKey: return "MissingKey";
        case ErrorCode::OutOfRange: return "OutOfRange";
        case ErrorCode::UnknownKey: return "UnknownKey";
        case ErrorCode::MissingDirectory: return "MissingDirectory";
        case ErrorCode::UndecodableImage: return "UndecodableImage";
        case ErrorCode::EmptyTrainSplit: return "EmptyTrainSplit";
        case ErrorCode::SemiSupervisedViolation: return "SemiSupervisedViolation";
        case ErrorCode::UnknownClass: return "UnknownClass";
        case ErrorCode::EmptySplit: return "EmptySplit";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::UnknownSkipMode: return "UnknownSkipMode";
        case ErrorCode::NonFiniteLatent: return "NonFiniteLatent";
        case ErrorCode::ExtractorNotLoaded: return "ExtractorNotLoaded";
        case ErrorCode::FileNotFound: return "FileNotFound";
        case ErrorCode::ShapeIncompatible: return "ShapeIncompatible";
        case ErrorCode::MissingExtractor: return "MissingExtractor";
        case ErrorCode::DomainError: return "DomainError";
        case ErrorCode::EmptyList: return "EmptyList";
        case ErrorCode::InsufficientData: return "InsufficientData";
        case ErrorCode::SingleClassLabels: return "SingleClassLabels";
        case ErrorCode::TooFewRuns: return "TooFewRuns";
        case ErrorCode::UnknownFormat: return "UnknownFormat";
        case ErrorCode::AnomalousTrainingSample: return "AnomalousTrainingSample";
        case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
        case ErrorCode::VersionMismatch: return "VersionMismatch";
        case ErrorCode::CorruptCheckpoint: return "CorruptCheckpoint";
        case ErrorCode::CheckpointWriteError: return "CheckpointWriteError";
        case ErrorCode::IoError: return "IoError";
        case ErrorCode::Internal: return "Internal";
    }
    return "Unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& msg)
        : std::runtime_error(std::string(to_string(code)) + ": " + msg), code_(code) {}

    ErrorCode code() const { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& msg) {
    throw Error(code, msg);
}

}  // namespace panda
