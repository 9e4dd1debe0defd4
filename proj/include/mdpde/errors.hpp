#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mdpde {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionMismatch : public Error {
public:
    using Error::Error;
};

/// Cholesky factorization of V_i failed for the group at `group()`.
class NotPositiveDefinite : public Error {
public:
    explicit NotPositiveDefinite(std::size_t group)
        : Error("covariance matrix of group " + std::to_string(group) + " is not positive definite"),
          group_(group) {}

    std::size_t group() const noexcept { return group_; }

private:
    std::size_t group_;
};

class NotBalanced : public Error {
public:
    NotBalanced() : Error("design is not balanced (group sizes or random-effect matrices differ)") {}
};

class SingularPsi : public Error {
public:
    using Error::Error;
};

class SingularSigma0 : public Error {
public:
    SingularSigma0() : Error("true covariance matrix is singular") {}
};

/// An estimated covariance matrix could not be factorized.
class SingularEstimate : public Error {
public:
    SingularEstimate() : Error("estimated covariance matrix is singular") {}
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

} // namespace mdpde
