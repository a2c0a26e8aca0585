#pragma once

#include <stdexcept>
#include <string>

namespace immlab {

// Every failure raised by the toolkit derives from Error. The subclass decides
// the process exit code used by the command-line front end.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual int exit_code() const noexcept { return 1; }
};

// Shapes or name sets of two checkpoints disagree, or a derived quantity is
// undefined for the data given (e.g. no weight change at all).
class DataError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 2; }
};

class ShapeError : public DataError {
public:
    using DataError::DataError;
};

class IncongruentError : public DataError {
public:
    using DataError::DataError;
};

// Values that became NaN/Inf.
class NumericError : public DataError {
public:
    using DataError::DataError;
};

// Bad arguments, flags or configuration documents.
class ConfigError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 3; }
};

class IoError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 4; }
};

// Malformed on-disk container.
class FormatError : public IoError {
public:
    using IoError::IoError;
};

// A lab run that cannot continue (e.g. nothing survived filtering at t = 0).
class AbortError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 5; }
};

} // namespace immlab
