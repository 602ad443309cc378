// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace moecl {

enum class ErrorKind {
    Dimension,
    EmptySupport,
    NonFinite,
    OutOfRange,
    UnknownTask,
    Duplicate,
    EmptyInput,
    Format,
    Io,
    Config,
    State,
};

std::string_view to_string(ErrorKind kind) noexcept;

/// Every failure raised by the library carries a machine-readable kind.
class Error : public std::runtime_error {
   public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

   private:
    ErrorKind kind_;
};

}  // namespace moecl
