#pragma once

#include <stdexcept>
#include <string>

namespace hetserve {

// Base for every error the library throws. The CLI maps the subclasses onto
// exit codes, so keep the hierarchy flat.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input file (JSON syntax, missing keys, bad binary header).
class ParseError : public Error {
 public:
  using Error::Error;
};

// Well-formed input that violates a domain invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

// No configuration satisfies the requested constraints.
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

// Numerical failure inside the surrogate (factorization after max jitter).
class FitError : public Error {
 public:
  using Error::Error;
};

}  // namespace hetserve
