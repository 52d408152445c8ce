#pragma once

#include <stdexcept>
#include <string>

namespace floodseg {

// Contract violations surface as typed exceptions so callers (and the CLI
// exit-code mapping) can branch on the failure class.

struct ShapeMismatch : std::runtime_error {
    explicit ShapeMismatch(const std::string& what) : std::runtime_error(what) {}
};

struct InvalidParam : std::runtime_error {
    explicit InvalidParam(const std::string& what) : std::runtime_error(what) {}
};

struct NotScalar : std::runtime_error {
    explicit NotScalar(const std::string& what) : std::runtime_error(what) {}
};

struct EmptyMask : std::runtime_error {
    explicit EmptyMask(const std::string& what) : std::runtime_error(what) {}
};

struct EmptyInput : std::runtime_error {
    explicit EmptyInput(const std::string& what) : std::runtime_error(what) {}
};

struct DuplicateId : std::runtime_error {
    explicit DuplicateId(const std::string& what) : std::runtime_error(what) {}
};

struct EmptySplit : std::runtime_error {
    explicit EmptySplit(const std::string& what) : std::runtime_error(what) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

struct DecodeError : std::runtime_error {
    explicit DecodeError(const std::string& what) : std::runtime_error(what) {}
};

// Checkpoint/config disagreement (wrong magic, version, or architecture).
struct CheckpointMismatch : std::runtime_error {
    explicit CheckpointMismatch(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace floodseg
