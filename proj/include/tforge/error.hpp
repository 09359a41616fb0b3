#pragma once

#include <stdexcept>
#include <string>

namespace tforge {

// Base for every error raised by the toolkit. The CLI maps UsageError to exit
// status 1 and everything else to 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class PoolError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public UsageError {
 public:
  using UsageError::UsageError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class DatasetError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// Gateway failures.
class TransportError : public Error {
 public:
  using Error::Error;
};

class RateLimitError : public TransportError {
 public:
  using TransportError::TransportError;
};

class HttpStatusError : public Error {
 public:
  HttpStatusError(int status, const std::string& what)
      : Error(what), status_(status) {}
  int status() const noexcept { return status_; }

 private:
  int status_;
};

class ResponseFormatError : public Error {
 public:
  using Error::Error;
};

class ReplayMissError : public Error {
 public:
  using Error::Error;
};

class EmptyCompletionError : public Error {
 public:
  using Error::Error;
};

class CancelledError : public Error {
 public:
  using Error::Error;
};

}  // namespace tforge
