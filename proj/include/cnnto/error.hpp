#pragma once

#include <stdexcept>
#include <string>

namespace cnnto {

/// Base of every error thrown by the toolkit. The CLI maps the two
/// families below onto exit codes 2 and 3.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad input or a violated precondition (shape mismatch, malformed file...).
class InputError : public Error {
public:
    using Error::Error;
};

/// Numerical failure during a computation that had valid inputs.
class NumericalError : public Error {
public:
    using Error::Error;
};

/// Reduced stiffness matrix is singular (e.g. not enough supports).
class SingularSystemError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

/// Factorization succeeded but the solution misses the residual target.
class SolverError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

/// Update rule is undefined for the given input (all-zero sensitivities).
class DegenerateInputError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

/// Lambda bisection could not bracket the volume target.
class BracketError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw InputError(what);
}

} // namespace cnnto
