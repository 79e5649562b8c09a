#pragma once

#include <stdexcept>
#include <string>

namespace npml {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad dimensions, out-of-range options, malformed inputs.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// The model produced a value outside its admissible range (e.g. g < 0).
class ModelViolation : public Error {
public:
    using Error::Error;
};

/// Every atom of a measure was removed.
class DegenerateMeasure : public Error {
public:
    using Error::Error;
};

/// An observation falls where the time density vanishes.
class SupportViolation : public Error {
public:
    using Error::Error;
};

/// A logarithm or ratio was requested outside its domain.
class NumericDomain : public Error {
public:
    using Error::Error;
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw InvalidArgument(what);
}

} // namespace npml
