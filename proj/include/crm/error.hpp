#pragma once

#include <stdexcept>
#include <string>

namespace crm {

// Base for every error the toolkit raises. Callers that only need a message
// catch this; the subclasses exist so tests and the HTTP layer can dispatch.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Precondition violated by the caller (bad sizes, out-of-range parameters).
class InvalidInput : public Error {
 public:
  using Error::Error;
};

// Trace container could not be decoded.
class TraceFormatError : public Error {
 public:
  using Error::Error;
};

// Input is well-formed but carries no usable signal (zero variance, equal
// class means, rank too small).
class DegenerateInput : public Error {
 public:
  using Error::Error;
};

// A feature level was requested but the trace lacks the section it needs.
class MissingSection : public Error {
 public:
  MissingSection(const std::string& section, const std::string& detail)
      : Error("missing section '" + section + "': " + detail), section_(section) {}
  const std::string& section() const noexcept { return section_; }

 private:
  std::string section_;
};

class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double gradient_norm)
      : Error(what), gradient_norm_(gradient_norm) {}
  double gradient_norm() const noexcept { return gradient_norm_; }

 private:
  double gradient_norm_;
};

// Two reports were compared whose evaluation configs differ.
class IncomparableRuns : public Error {
 public:
  using Error::Error;
};

// A request or file is well-formed but its shape disagrees with the loaded
// calibration artifact.
class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

class ExtractorUnavailable : public Error {
 public:
  using Error::Error;
};

class UpstreamTimeout : public Error {
 public:
  using Error::Error;
};

}  // namespace crm
