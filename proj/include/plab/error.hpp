#pragma once

#include <stdexcept>
#include <string>

namespace plab {

enum class ErrorKind {
  shape,
  config,
  input,
  load,
  cache_miss,
  model,
  template_text,
  identity,
  pairing,
  tokenization,
  parse,
  degenerate,
  usage,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::shape: return "shape error";
    case ErrorKind::config: return "config error";
    case ErrorKind::input: return "input error";
    case ErrorKind::load: return "load error";
    case ErrorKind::cache_miss: return "cache-miss error";
    case ErrorKind::model: return "model error";
    case ErrorKind::template_text: return "template error";
    case ErrorKind::identity: return "identity error";
    case ErrorKind::pairing: return "pairing error";
    case ErrorKind::tokenization: return "tokenization error";
    case ErrorKind::parse: return "parse error";
    case ErrorKind::degenerate: return "degenerate-statistic error";
    case ErrorKind::usage: return "usage error";
  }
  return "error";
}

/// Every failure raised by the library carries a kind so callers (the CLI in
/// particular) can map it to an exit code without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what),
        kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

}  // namespace plab
