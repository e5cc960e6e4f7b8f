#pragma once

#include <stdexcept>
#include <string>

namespace bda {

// Base for every error raised by the library. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

// Checkpoint archive failed its length or checksum test.
class IntegrityError : public Error {
public:
    using Error::Error;
};

// Checkpoint written by an incompatible format version.
class VersionError : public Error {
public:
    using Error::Error;
};

}  // namespace bda
