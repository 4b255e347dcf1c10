#pragma once

#include <stdexcept>
#include <string>

namespace flowtint {

// Exit-code categories used by the CLI: 2 usage, 3 data, 4 numeric, 5 remote.
enum class ErrorKind { usage = 2, data = 3, numeric = 4, remote = 5 };

class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, std::string msg) : std::runtime_error(std::move(msg)), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }

private:
  ErrorKind kind_;
};

struct DimensionError : Error {
  explicit DimensionError(std::string msg) : Error(ErrorKind::data, std::move(msg)) {}
};

struct DomainError : Error {
  explicit DomainError(std::string msg) : Error(ErrorKind::data, std::move(msg)) {}
};

struct ConfigError : Error {
  explicit ConfigError(std::string msg) : Error(ErrorKind::usage, std::move(msg)) {}
};

struct DataError : Error {
  explicit DataError(std::string msg) : Error(ErrorKind::data, std::move(msg)) {}
};

struct NumericError : Error {
  explicit NumericError(std::string msg) : Error(ErrorKind::numeric, std::move(msg)) {}
};

struct RemoteError : Error {
  explicit RemoteError(std::string msg) : Error(ErrorKind::remote, std::move(msg)) {}
};

// Malformed response body from a remote scorer; carries the raw payload.
struct ProtocolError : Error {
  ProtocolError(std::string msg, std::string payload)
      : Error(ErrorKind::remote, msg + " [payload: " + payload + "]"), raw_payload(std::move(payload)) {}
  std::string raw_payload;
};

}  // namespace flowtint
