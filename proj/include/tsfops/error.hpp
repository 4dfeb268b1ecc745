#pragma once

#include <stdexcept>
#include <string>

namespace tsfops {

/// Base class of every failure raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A referenced entity (run, series, entrypoint, dataset) does not exist.
class NotFoundError : public Error {
public:
    using Error::Error;
};

/// A configuration or option map was rejected before any work started.
class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace tsfops
