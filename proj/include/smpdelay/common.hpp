#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>
#include <vector>

namespace smpdelay {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Third/fourth order coefficient blocks. Tensor3[k] is the Hessian (or Jacobian
// block) attached to output component k; Tensor4[i][j] nests per noise column.
using Tensor3 = std::vector<Mat>;
using Tensor4 = std::vector<Tensor3>;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad user-supplied sizes, counts, tolerances.
struct ConfigError : Error { using Error::Error; };

// Callback output has the wrong dimensions for the declared problem.
struct ShapeError : Error { using Error::Error; };

// Atom or delay span does not sit on the time grid (message carries the fix).
struct AlignmentError : Error { using Error::Error; };

// Evaluation outside the supported domain, e.g. a lag beyond [-d, 0].
struct DomainError : Error { using Error::Error; };

// Two inputs that must describe the same run (grid/seed/spec) disagree.
struct ConsistencyError : Error { using Error::Error; };

// Kernel time grid leaves part of [0, T] without a usable sample.
struct CoverageError : Error { using Error::Error; };

// Operation needs a prerequisite transform first (e.g. atoms not mollified).
struct PipelineError : Error { using Error::Error; };

struct DivergenceError : Error {
  int step;
  DivergenceError(const std::string& msg, int step_) : Error(msg), step(step_) {}
};

struct ConditioningError : Error {
  int step;
  ConditioningError(const std::string& msg, int step_) : Error(msg), step(step_) {}
};

} // namespace smpdelay
