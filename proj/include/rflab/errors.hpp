#pragma once

#include <stdexcept>
#include <string>

namespace rflab {

/// Base for every error thrown by the library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed input data (bad line in a file, schema violation, ...).
class ParseError : public Error {
public:
    ParseError(const std::string& path, std::size_t line, const std::string& what)
        : Error(path + ":" + std::to_string(line) + ": " + what), path_(path), line_(line) {}

    explicit ParseError(const std::string& what) : Error(what), line_(0) {}

    const std::string& path() const { return path_; }
    std::size_t line() const { return line_; }

private:
    std::string path_;
    std::size_t line_;
};

/// Invalid or inconsistent configuration. The CLI maps this to exit code 1.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(what) {}
};

/// Failure talking to an external rewriter or embedder endpoint.
class ClientError : public Error {
public:
    explicit ClientError(const std::string& what) : Error(what) {}
};

}  // namespace rflab
