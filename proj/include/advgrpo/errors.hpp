#pragma once

#include <stdexcept>
#include <string>

namespace advgrpo {

// All library errors derive from Error so callers (the CLI in particular) can
// map them onto exit codes in one place.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An id (token, answer, modality, ...) outside its declared range.
class RangeError : public Error {
 public:
  using Error::Error;
};

// Text that does not match the tagged output grammar.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or incompatible inputs.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A loss term the policy cannot differentiate in its current mode.
class UnsupportedLoss : public Error {
 public:
  using Error::Error;
};

// Loss or parameters became non-finite during training.
class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

// Argument outside a mathematical function's domain.
class DomainError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace advgrpo
