#pragma once

#include <stdexcept>
#include <string>

namespace thermosr {

// File and decode problems (missing paths, malformed PNG/BMP/JSONL, ...).
struct io_error : std::runtime_error {
    explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Structurally valid input that violates a documented contract
// (bad shapes, out-of-range values, schema violations, ...).
struct validation_error : std::runtime_error {
    explicit validation_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Problems in experiment configuration files or option combinations.
struct config_error : std::runtime_error {
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace thermosr
