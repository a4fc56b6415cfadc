#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace vkd {

// Runtime error carrying a stable machine-readable code alongside the message.
// Codes are short kebab-case tokens ("shape-mismatch", "bad-label", ...) used
// by tests and by the CLI to map failures to exit codes.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(code + ": " + message), code_(std::move(code)) {}

  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

[[noreturn]] inline void fail(const std::string& code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace vkd
