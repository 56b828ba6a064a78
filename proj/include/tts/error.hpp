#pragma once

#include <stdexcept>
#include <string>

namespace tts {

class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Caller violated an operation precondition (empty keypoints, unequal counts, ...).
class PreconditionError : public Error {
  public:
    using Error::Error;
};

// A pixel coordinate falls outside the image it refers to.
class CoordinateError : public Error {
  public:
    using Error::Error;
};

class ShapeError : public Error {
  public:
    using Error::Error;
};

class NonFiniteError : public Error {
  public:
    using Error::Error;
};

class SamplingError : public Error {
  public:
    using Error::Error;
};

class ParseError : public Error {
  public:
    using Error::Error;
};

class ConfigError : public Error {
  public:
    using Error::Error;
};

class MetricError : public Error {
  public:
    using Error::Error;
};

class UnsupportedArchitectureError : public Error {
  public:
    using Error::Error;
};

class TrainingError : public Error {
  public:
    TrainingError(const std::string& what, int epoch) : Error(what), epoch_(epoch) {}
    int epoch() const noexcept { return epoch_; }

  private:
    int epoch_;
};

} // namespace tts
