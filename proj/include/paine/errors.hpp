#pragma once

#include <stdexcept>
#include <string>

namespace paine {

// Error taxonomy shared by the library and the CLI exit-code mapping:
// usage/config/dimension -> 1, data -> 2, numeric -> 3.
enum class ErrKind { Usage, Config, Dimension, Data, Numeric };

class Error : public std::runtime_error {
 public:
  Error(ErrKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}

  ErrKind kind() const { return kind_; }

  const char* kind_name() const {
    switch (kind_) {
      case ErrKind::Usage: return "usage";
      case ErrKind::Config: return "config";
      case ErrKind::Dimension: return "dimension";
      case ErrKind::Data: return "data";
      case ErrKind::Numeric: return "numeric";
    }
    return "unknown";
  }

  int exit_code() const {
    switch (kind_) {
      case ErrKind::Data: return 2;
      case ErrKind::Numeric: return 3;
      default: return 1;
    }
  }

 private:
  ErrKind kind_;
};

[[noreturn]] inline void throw_usage(const std::string& m) { throw Error(ErrKind::Usage, m); }
[[noreturn]] inline void throw_config(const std::string& m) { throw Error(ErrKind::Config, m); }
[[noreturn]] inline void throw_dim(const std::string& m) { throw Error(ErrKind::Dimension, m); }
[[noreturn]] inline void throw_data(const std::string& m) { throw Error(ErrKind::Data, m); }
[[noreturn]] inline void throw_numeric(const std::string& m) { throw Error(ErrKind::Numeric, m); }

}  // namespace paine
