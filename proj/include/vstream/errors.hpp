#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace vstream {

enum class ErrorKind {
  InvalidConfig,
  TierMismatch,
  NonFinite,
  Sequencing,
  Storage,
  NotFound,
  Parse,
  BankIntegrity,
  Lifecycle,
  InvalidState,
  Usage,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidConfig: return "invalid-config";
    case ErrorKind::TierMismatch: return "tier-mismatch";
    case ErrorKind::NonFinite: return "non-finite";
    case ErrorKind::Sequencing: return "sequencing";
    case ErrorKind::Storage: return "storage";
    case ErrorKind::NotFound: return "not-found";
    case ErrorKind::Parse: return "parse";
    case ErrorKind::BankIntegrity: return "bank-integrity";
    case ErrorKind::Lifecycle: return "lifecycle";
    case ErrorKind::InvalidState: return "invalid-state";
    case ErrorKind::Usage: return "usage";
  }
  return "unknown";
}

// All engine failures surface as this exception; kind() is the stable
// discriminator, what() carries the human-readable detail.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace vstream
