#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace slm {

using TokenId = int32_t;
using StyleId = int32_t;

// Error idiom: std::invalid_argument for input-domain violations,
// std::domain_error for numeric-domain failures (NaN, divergence).
[[noreturn]] inline void fail_input(const std::string& msg) {
    throw std::invalid_argument(msg);
}
[[noreturn]] inline void fail_numeric(const std::string& msg) {
    throw std::domain_error(msg);
}

#define SLM_REQUIRE(cond, msg)                  \
    do {                                        \
        if (!(cond)) ::slm::fail_input(msg);    \
    } while (0)

template <typename... Args>
std::string cat(Args&&... args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}

}  // namespace slm
