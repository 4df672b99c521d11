#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

// Stream-style runtime check. Throws std::runtime_error with the built message.
#define SEQFM_CHECK(cond, msg_expr)                  \
    do {                                             \
        if (!(cond)) {                               \
            std::ostringstream oss_;                 \
            oss_ << msg_expr;                        \
            throw std::runtime_error(oss_.str());    \
        }                                            \
    } while (0)

namespace seqfm {

using u8 = std::uint8_t;
using u16 = std::uint16_t;
using u32 = std::uint32_t;
using u64 = std::uint64_t;
using i64 = std::int64_t;

} // namespace seqfm
