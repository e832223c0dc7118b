#pragma once

#include <complex>
#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>
#include <Eigen/Sparse>

namespace qsteady {

using Complex = std::complex<double>;
using SparseOp = Eigen::SparseMatrix<Complex>;
using DenseMatrix = Eigen::MatrixXcd;
using DenseVector = Eigen::VectorXcd;
using RealVector = Eigen::VectorXd;
using Triplet = Eigen::Triplet<Complex>;
using Index = Eigen::Index;

inline constexpr double kPi = 3.14159265358979323846;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UsageError : Error {
  using Error::Error;
};

struct DimensionError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

struct UnsupportedError : Error {
  using Error::Error;
};

// Iteration budget exhausted before the stationarity target was met.
struct ConvergenceError : Error {
  ConvergenceError(const std::string& msg, double residual_, double reached_time_)
      : Error(msg), residual(residual_), reached_time(reached_time_) {}
  double residual = 0.0;
  double reached_time = 0.0;
};

// The vectorized generator has more than one stationary direction.
struct DegenerateKernelError : Error {
  DegenerateKernelError(const std::string& msg, int kernel_dim_)
      : Error(msg), kernel_dim(kernel_dim_) {}
  int kernel_dim = 0;
};

struct PositivityError : Error {
  PositivityError(const std::string& msg, double min_eigenvalue_)
      : Error(msg), min_eigenvalue(min_eigenvalue_) {}
  double min_eigenvalue = 0.0;
};

struct StepSizeError : Error {
  using Error::Error;
};

// An expectation value that must be real came back with a large imaginary part.
struct HermiticityError : Error {
  HermiticityError(const std::string& msg, double imag_part_)
      : Error(msg), imag_part(imag_part_) {}
  double imag_part = 0.0;
};

}  // namespace qsteady
