#pragma once

#include <stdexcept>
#include <string>

namespace tasl {

/// Base class of every error raised by the library. `kind()` is a stable,
/// machine-parsable class name that the CLI prints on failure.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define TASL_DEFINE_ERROR(Name)                                        \
  class Name : public Error {                                          \
   public:                                                             \
    explicit Name(const std::string& what) : Error(#Name, what) {}     \
  }

TASL_DEFINE_ERROR(ParameterError);
TASL_DEFINE_ERROR(GeometryError);
TASL_DEFINE_ERROR(FormatError);
TASL_DEFINE_ERROR(ShapeError);
TASL_DEFINE_ERROR(NoEnhancementError);
TASL_DEFINE_ERROR(DataError);
TASL_DEFINE_ERROR(DivergenceError);
TASL_DEFINE_ERROR(ConfigError);
TASL_DEFINE_ERROR(IoError);
TASL_DEFINE_ERROR(MetricError);

#undef TASL_DEFINE_ERROR

}  // namespace tasl
