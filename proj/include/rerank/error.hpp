#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>

namespace rerank {

// Broad failure class; the CLI maps it onto its exit codes.
enum class ErrorKind {
  usage,    // bad arguments or preconditions
  io,       // files
  backend,  // LLM transport, helper replies
  numeric,  // solver / linear algebra
};

// Library exception. `code()` is a stable snake_case identifier such as
// "profile_too_short"; `index()` optionally names the chunk, permutation or
// line the failure refers to.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string code, const std::string& detail = {},
        std::optional<std::size_t> index = std::nullopt)
      : std::runtime_error(detail.empty() ? code : code + ": " + detail),
        kind_(kind),
        code_(std::move(code)),
        index_(index) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& code() const noexcept { return code_; }
  std::optional<std::size_t> index() const noexcept { return index_; }

 private:
  ErrorKind kind_;
  std::string code_;
  std::optional<std::size_t> index_;
};

}  // namespace rerank
