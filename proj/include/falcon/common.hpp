#pragma once

// Error taxonomy shared by every module. The CLI maps these onto distinct
// exit codes, so new error kinds should extend the hierarchy rather than
// throw bare std::runtime_error.

#include <stdexcept>
#include <string>

namespace falcon {

struct InvalidInputError : std::runtime_error {
    explicit InvalidInputError(const std::string& msg) : std::runtime_error(msg) {}
};

// Violation of an internal API precondition (caller bug, not bad data).
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or truncated on-disk artifact (bad magic, version, sizes).
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

struct PartitionError : std::runtime_error {
    explicit PartitionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Inconsistent payloads or protocol misuse between clients and server.
struct ProtocolError : std::runtime_error {
    explicit ProtocolError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace falcon
