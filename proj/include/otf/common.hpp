#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace otf {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Base class for all toolkit errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Caller violated a documented precondition (bad dimension, bad index, ...).
struct ContractError : Error {
  using Error::Error;
};

// A numeric result left the representable/finite range.
struct NumericError : Error {
  using Error::Error;
};

// Training loop left the stable regime (objective blew up, NaN gradients).
struct TrainingDivergedError : NumericError {
  using NumericError::NumericError;
};

// Configuration file failed to parse or validate.
struct ConfigError : Error {
  using Error::Error;
};

namespace detail {
inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}
}  // namespace detail

/// Symmetric square root of a positive semidefinite matrix (eigenvalues
/// below -1e-10 * scale are rejected, small negatives clamped to zero).
inline Mat psd_sqrt(const Mat& a) {
  Eigen::SelfAdjointEigenSolver<Mat> es(a);
  detail::require(es.info() == Eigen::Success, "psd_sqrt: eigendecomposition failed");
  const double scale = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  detail::require(es.eigenvalues().minCoeff() > -1e-10 * scale, "psd_sqrt: matrix is not positive semidefinite");
  const Vec root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace otf
