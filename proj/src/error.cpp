// SPDX-License-Identifier: Apache-2.0
#include "moecl/error.hpp"

namespace moecl {

std::string_view to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::Dimension: return "dimension";
        case ErrorKind::EmptySupport: return "empty_support";
        case ErrorKind::NonFinite: return "non_finite";
        case ErrorKind::OutOfRange: return "out_of_range";
        case ErrorKind::UnknownTask: return "unknown_task";
        case ErrorKind::Duplicate: return "duplicate";
        case ErrorKind::EmptyInput: return "empty_input";
        case ErrorKind::Format: return "format";
        case ErrorKind::Io: return "io";
        case ErrorKind::Config: return "config";
        case ErrorKind::State: return "state";
    }
    return "unknown";
}

}  // namespace moecl
