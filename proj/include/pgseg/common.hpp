#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace pgseg {

using i64 = std::int64_t;
using Rng = std::mt19937_64;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};
class ArgumentError : public Error {
 public:
  using Error::Error;
};
class ConfigError : public Error {
 public:
  using Error::Error;
};
class VocabularyError : public Error {
 public:
  using Error::Error;
};
class ValidationError : public Error {
 public:
  using Error::Error;
};
class NumericError : public Error {
 public:
  using Error::Error;
};
class StateError : public Error {
 public:
  using Error::Error;
};
class IoError : public Error {
 public:
  using Error::Error;
};

// Thread cap for all OpenMP kernels. 0 = library default.
void set_num_threads(int n);
int num_threads();

}  // namespace pgseg
