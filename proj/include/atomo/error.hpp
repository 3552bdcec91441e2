#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace atomo {

enum class ErrorKind {
  kInvalidArgument,
  kConfig,
  kIo,
  kData,
  kAssembly,
  kStability,
  kDivergence,
  kSingularPair,
  kUnderflow,
  kFit,
  kBasis,
  kCalibration,
};

std::string_view kind_name(ErrorKind kind);

// Everything the library throws on purpose.  The kind decides the CLI exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(kind_name(kind)) + ": " + what), kind_(kind), message_(what) {}
  ErrorKind kind() const noexcept { return kind_; }
  // what() without the kind prefix
  const std::string& message() const noexcept { return message_; }

 private:
  ErrorKind kind_;
  std::string message_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool ok, const std::string& what) {
  if (!ok) fail(ErrorKind::kInvalidArgument, what);
}

// 0 ok, 2 config, 3 data, 4 numerical
int exit_code_for(ErrorKind kind);

}  // namespace atomo
