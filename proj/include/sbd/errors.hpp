#pragma once

#include <stdexcept>
#include <string>

namespace sbd {

// All library failures derive from Error so callers can catch one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class LayoutError : public Error {
 public:
  using Error::Error;
};

class CapacityError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class SpecError : public Error {
 public:
  using Error::Error;
};

// Corpus, vocabulary and encoding failures.
class DataError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Raised when a non-finite loss shows up during training.
class TrainingError : public Error {
 public:
  using Error::Error;
};

// A recomputed quantity disagreed with its closed-form prediction.
class InvariantError : public Error {
 public:
  using Error::Error;
};

}  // namespace sbd
