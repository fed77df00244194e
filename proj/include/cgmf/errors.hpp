#pragma once

#include <stdexcept>
#include <string>

namespace cgmf {

/// Shape disagreement between operands (width, frame count, token count).
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid FusionConfig or config-file field. `field()` names the offender.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& what)
      : std::invalid_argument(field.empty() ? what : field + ": " + what),
        field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class UnsupportedOpError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A record or record set that has no defined score.
class ScoringError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Container bytes are inconsistent with their own header.
class CorruptionError : public IoError {
 public:
  using IoError::IoError;
};

/// Container is well formed but does not match what the caller expected.
class SchemaError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace cgmf
