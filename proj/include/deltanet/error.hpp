#pragma once

#include <stdexcept>
#include <string>

namespace deltanet {

// Error hierarchy shared by every module. `category()` is stable and
// machine-parseable; the CLI maps it to an exit code.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual const char* category() const noexcept { return "error"; }
};

class DimensionError : public Error {
public:
  using Error::Error;
  const char* category() const noexcept override { return "dimension"; }
};

class IndexError : public Error {
public:
  using Error::Error;
  const char* category() const noexcept override { return "index"; }
};

class UsageError : public Error {
public:
  using Error::Error;
  const char* category() const noexcept override { return "usage"; }
};

class NumericError : public Error {
public:
  using Error::Error;
  const char* category() const noexcept override { return "numeric"; }
};

class IoError : public Error {
public:
  using Error::Error;
  const char* category() const noexcept override { return "io"; }
};

}  // namespace deltanet
