#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ltds {

enum class ErrorKind {
  domain,        // mathematically undefined input (zero norm, indefinite matrix)
  input,         // malformed or inconsistent argument
  config,        // invalid configuration
  parse,         // malformed file content
  protocol,      // violated training/evaluation protocol
  construction,  // unsupported graph construction in the gradient engine
  io,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class DomainError : public Error {
 public:
  explicit DomainError(const std::string& m) : Error(ErrorKind::domain, m) {}
};

class InputError : public Error {
 public:
  explicit InputError(const std::string& m) : Error(ErrorKind::input, m) {}
};

class ConfigError : public Error {
 public:
  /// `field` names the offending configuration key and is prefixed to the message.
  ConfigError(const std::string& field, const std::string& m)
      : Error(ErrorKind::config, field + ": " + m), field_(field) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& file, std::size_t line, const std::string& m)
      : Error(ErrorKind::parse, file + ":" + std::to_string(line) + ": " + m), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ProtocolError : public Error {
 public:
  explicit ProtocolError(const std::string& m) : Error(ErrorKind::protocol, m) {}
};

class ConstructionError : public Error {
 public:
  explicit ConstructionError(const std::string& m) : Error(ErrorKind::construction, m) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& m) : Error(ErrorKind::io, m) {}
};

}  // namespace ltds
