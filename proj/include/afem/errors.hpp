#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace afem {

/// Invalid arguments (zero cell counts, bad config combinations, ...).
class DomainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Shape mismatch between a tensor and the mesh or operator it is cast onto.
class CastError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Pointwise function returned a non-finite value at a mesh vertex.
class InterpolationError : public std::runtime_error {
 public:
  InterpolationError(const std::string& what, std::size_t vertex)
      : std::runtime_error(what), vertex_(vertex) {}
  std::size_t vertex() const noexcept { return vertex_; }

 private:
  std::size_t vertex_;
};

/// e^kappa overflowed at a quadrature point.
class AssemblyError : public std::runtime_error {
 public:
  AssemblyError(const std::string& what, std::size_t element)
      : std::runtime_error(what), element_(element) {}
  std::size_t element() const noexcept { return element_; }

 private:
  std::size_t element_;
};

enum class SolvePhase { kForward, kAdjoint };

/// Conjugate gradient did not reach the requested tolerance.
class SolverError : public std::runtime_error {
 public:
  SolverError(const std::string& what, double residual, SolvePhase phase)
      : std::runtime_error(what), residual_(residual), phase_(phase) {}
  double residual() const noexcept { return residual_; }
  SolvePhase phase() const noexcept { return phase_; }

 private:
  double residual_;
  SolvePhase phase_;
};

/// Non-finite loss or gradient during optimization.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or truncated file; offset is the byte position of the failure.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace afem
