#pragma once

#include <stdexcept>
#include <string>

namespace hint {

// Root of every error the library throws. Subclasses map onto the error
// kinds callers are expected to distinguish (the CLI maps them onto exit
// codes).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidInputError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents (IDX, parameter or dataset containers).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Dense solve hit a singular or indefinite system; raise the damping.
class NotInvertibleError : public Error {
 public:
  using Error::Error;
};

// LiSSA recursion blew up; the scale is too small for the Hessian.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

// An InfluenceVector was used against parameters it was not computed for.
class StaleInfluenceError : public Error {
 public:
  using Error::Error;
};

class ConvergenceError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Missing or unreadable artifact on disk.
class ArtifactError : public Error {
 public:
  using Error::Error;
};

// Artifact exists but its content hash does not match its manifest.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

}  // namespace hint
