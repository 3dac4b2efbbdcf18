#pragma once

#include <stdexcept>
#include <string>

namespace vitlm {

// Every error carries a short machine-readable kind used by the CLI.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& w) : Error("dimension", w) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& w) : Error("contract", w) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& w) : Error("config", w) {}
};

class NonFiniteError : public Error {
 public:
  explicit NonFiniteError(const std::string& w) : Error("non_finite", w) {}
};

class OutOfVocabularyError : public Error {
 public:
  explicit OutOfVocabularyError(const std::string& w) : Error("out_of_vocabulary", w) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& w) : Error("format", w) {}
};

class UnsupportedError : public Error {
 public:
  explicit UnsupportedError(const std::string& w) : Error("unsupported", w) {}
};

class LengthError : public Error {
 public:
  explicit LengthError(const std::string& w) : Error("length", w) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& w) : Error("io", w) {}
};

}  // namespace vitlm
