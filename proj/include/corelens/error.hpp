#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace corelens {

enum class ErrorKind {
  Format,       // malformed file header or payload
  Consistency,  // parallel arrays disagree (metadata vs payload)
  Data,         // non-finite values, zero vectors, out-of-range ids
  Io,
  Config,
  Dimension,
  Training,     // missing class/group in a training split
  Rank,         // linearly dependent background vectors
  Conditioning, // Gram matrix too ill-conditioned to invert
  Numerical,    // non-finite loss during optimization
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Format: return "format error";
    case ErrorKind::Consistency: return "consistency error";
    case ErrorKind::Data: return "data error";
    case ErrorKind::Io: return "I/O error";
    case ErrorKind::Config: return "configuration error";
    case ErrorKind::Dimension: return "dimension mismatch";
    case ErrorKind::Training: return "training error";
    case ErrorKind::Rank: return "rank error";
    case ErrorKind::Conditioning: return "conditioning error";
    case ErrorKind::Numerical: return "numerical error";
  }
  return "error";
}

/// Process exit status for the CLI: 2 config, 3 data, 4 numerical.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return 2;
    case ErrorKind::Rank:
    case ErrorKind::Conditioning:
    case ErrorKind::Numerical: return 4;
    default: return 3;
  }
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what, std::optional<std::size_t> index = std::nullopt)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind), index_(index) {}

  ErrorKind kind() const noexcept { return kind_; }
  /// Offending row / column / group, when the error is about one.
  std::optional<std::size_t> index() const noexcept { return index_; }

 private:
  ErrorKind kind_;
  std::optional<std::size_t> index_;
};

inline void require(bool cond, ErrorKind kind, const std::string& what,
                    std::optional<std::size_t> index = std::nullopt) {
  if (!cond) throw Error(kind, what, index);
}

}  // namespace corelens
