#pragma once
#include <stdexcept>
#include <string>

namespace nq {

// Error categories map to CLI exit codes: config=2, io=3, feasibility=4.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct FeasibilityError : std::runtime_error {
    explicit FeasibilityError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace nq
