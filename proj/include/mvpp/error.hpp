#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

namespace mvpp {

// Base for every error raised by the library. A step index can be attached
// after the fact (the engine does this when a run fails part way through).
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what), message_(what) {}

  const char* what() const noexcept override {
    return full_.empty() ? message_.c_str() : full_.c_str();
  }

  const std::string& message() const noexcept { return message_; }
  std::optional<std::uint64_t> step() const noexcept { return step_; }

  void attach_step(std::uint64_t step) {
    step_ = step;
    full_ = message_ + " (at step " + std::to_string(step) + ")";
  }

 private:
  std::string message_;
  std::string full_;
  std::optional<std::uint64_t> step_;
};

#define MVPP_DEFINE_ERROR(Name)                                   \
  class Name : public Error {                                     \
   public:                                                        \
    explicit Name(const std::string& what) : Error(#Name ": " + what) {} \
  }

MVPP_DEFINE_ERROR(TenabilityViolation);
MVPP_DEFINE_ERROR(EmptyMeasure);
MVPP_DEFINE_ERROR(InvalidPoint);
MVPP_DEFINE_ERROR(MeanUnavailable);
MVPP_DEFINE_ERROR(InvalidMatrix);
MVPP_DEFINE_ERROR(InvalidParams);
MVPP_DEFINE_ERROR(NoConvergence);
MVPP_DEFINE_ERROR(UnknownReference);
MVPP_DEFINE_ERROR(NotNormalized);
MVPP_DEFINE_ERROR(DimensionUnsupported);
MVPP_DEFINE_ERROR(EmptyTrace);
MVPP_DEFINE_ERROR(HorizonCapExceeded);
MVPP_DEFINE_ERROR(InvariantViolation);
MVPP_DEFINE_ERROR(UnknownModel);
MVPP_DEFINE_ERROR(IoError);

#undef MVPP_DEFINE_ERROR

// Configuration errors carry the offending field and, when known, the line.
class ParseError : public Error {
 public:
  ParseError(const std::string& field, const std::string& what, std::optional<std::size_t> line = {})
      : Error("ParseError: " + (line ? "line " + std::to_string(*line) + ": " : std::string()) +
              (field.empty() ? std::string() : "field '" + field + "': ") + what),
        field_(field),
        line_(line) {}

  const std::string& field() const noexcept { return field_; }
  std::optional<std::size_t> line() const noexcept { return line_; }

 private:
  std::string field_;
  std::optional<std::size_t> line_;
};

// A replica of a seed sweep failed; the seed is part of the message.
class ReplicaError : public Error {
 public:
  ReplicaError(std::uint64_t seed, const std::string& what)
      : Error("seed " + std::to_string(seed) + ": " + what), seed_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

 private:
  std::uint64_t seed_;
};

}  // namespace mvpp
