#pragma once

#include <cstdio>
#include <string>

namespace thermosr {

// Non-fatal diagnostics go to stderr so stdout stays clean for tool output.
inline void warn(const std::string& msg) {
    std::fprintf(stderr, "[thermosr] warning: %s\n", msg.c_str());
}

}  // namespace thermosr
