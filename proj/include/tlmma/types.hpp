#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>
#include <string_view>

namespace tlmma {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// I - rho W could not be factorized to working precision.
class SingularFilterError : public Error {
 public:
  SingularFilterError(double rho, const std::string& what) : Error(what), rho_(rho) {}
  double rho() const noexcept { return rho_; }

 private:
  double rho_;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

enum class Method { mle, tsls };

inline std::string_view to_string(Method m) { return m == Method::mle ? "mle" : "2sls"; }

inline Method parse_method(std::string_view s) {
  if (s == "mle" || s == "MLE") return Method::mle;
  if (s == "2sls" || s == "2SLS" || s == "tsls" || s == "TSLS") return Method::tsls;
  throw InvalidArgument("unknown estimation method '" + std::string(s) + "' (expected mle|2sls)");
}

}  // namespace tlmma
