#pragma once

#include <stdexcept>
#include <string>

namespace mrad {

// Maps one-to-one onto CLI exit codes (2, 3, 4).
enum class ErrorKind {
    Io,
    Validation,
    Numerical,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind)
    {
    }

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void throw_io(const std::string& what)
{
    throw Error(ErrorKind::Io, what);
}

[[noreturn]] inline void throw_validation(const std::string& what)
{
    throw Error(ErrorKind::Validation, what);
}

[[noreturn]] inline void throw_numerical(const std::string& what)
{
    throw Error(ErrorKind::Numerical, what);
}

inline int exit_code(ErrorKind kind)
{
    switch (kind) {
    case ErrorKind::Io: return 2;
    case ErrorKind::Validation: return 3;
    case ErrorKind::Numerical: return 4;
    }
    return 1;
}

} // namespace mrad
