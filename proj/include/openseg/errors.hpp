#pragma once

#include <stdexcept>
#include <string>

namespace openseg {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

class EmptyMaskError : public Error {
public:
    using Error::Error;
};

class VocabularyError : public Error {
public:
    using Error::Error;
};

/// More ground truths than queries.
class CapacityError : public Error {
public:
    using Error::Error;
};

/// Brute-force oracle refused an input that is too large to enumerate.
class SizeError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class SamplingError : public Error {
public:
    using Error::Error;
};

/// Corrupt checkpoint, dataset or annotation index.
class IntegrityError : public Error {
public:
    using Error::Error;
};

class ModelStateError : public Error {
public:
    using Error::Error;
};

/// Non-finite loss during training. Carries the path of the diagnostic dump, if one was written.
class NumericalError : public Error {
public:
    NumericalError(const std::string& what, std::string dump_path = {})
        : Error(what), dump_path_(std::move(dump_path)) {}
    const std::string& dump_path() const noexcept { return dump_path_; }

private:
    std::string dump_path_;
};

}  // namespace openseg
