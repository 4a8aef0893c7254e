#pragma once

#include <stdexcept>
#include <string>

namespace fedssl {

// Root of every error raised by the library. Each subclass corresponds to one
// failure contract so callers (and the CLI exit-code mapping) can dispatch on
// type rather than on message text.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class ContractError : public Error {
public:
    using Error::Error;
};

class MissingGradError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

class EmptyBankError : public Error {
public:
    using Error::Error;
};

class DegenerateMaskError : public Error {
public:
    using Error::Error;
};

class SchemaError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

class RoundAborted : public Error {
public:
    using Error::Error;
};

}  // namespace fedssl
