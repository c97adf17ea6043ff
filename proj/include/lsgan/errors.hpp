#pragma once

#include <stdexcept>
#include <string>

namespace lsgan {

// Exception hierarchy. Every error carries a category so the CLI can map it
// onto an exit code without string matching.
enum class ErrorKind {
  invalid_path,
  invalid_degree,
  shape,
  invalid_group_element,
  invalid_condition,
  undefined_loss,
  diverged_chain,
  empty_ensemble,
  data,
  config,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct InvalidPathError : Error {
  explicit InvalidPathError(const std::string& w) : Error(ErrorKind::invalid_path, w) {}
};
struct InvalidDegreeError : Error {
  explicit InvalidDegreeError(const std::string& w) : Error(ErrorKind::invalid_degree, w) {}
};
struct ShapeError : Error {
  explicit ShapeError(const std::string& w) : Error(ErrorKind::shape, w) {}
};
struct InvalidGroupElementError : Error {
  explicit InvalidGroupElementError(const std::string& w)
      : Error(ErrorKind::invalid_group_element, w) {}
};
struct InvalidConditionError : Error {
  explicit InvalidConditionError(const std::string& w)
      : Error(ErrorKind::invalid_condition, w) {}
};
struct UndefinedLossError : Error {
  explicit UndefinedLossError(const std::string& w) : Error(ErrorKind::undefined_loss, w) {}
};
struct DivergedChainError : Error {
  explicit DivergedChainError(const std::string& w) : Error(ErrorKind::diverged_chain, w) {}
};
struct EmptyEnsembleError : Error {
  explicit EmptyEnsembleError(const std::string& w) : Error(ErrorKind::empty_ensemble, w) {}
};
struct DataError : Error {
  explicit DataError(const std::string& w) : Error(ErrorKind::data, w) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorKind::config, w) {}
};

}  // namespace lsgan
