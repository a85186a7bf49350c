#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace coopdet {

// Error taxonomy shared by all modules. The CLI maps these onto its
// single-line machine-parseable error output.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CapacityError : std::runtime_error {
    explicit CapacityError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

constexpr double kPi = 3.14159265358979323846;

// Wrap an angle into [0, 2*pi).
double wrap_two_pi(double a);

// Wrap an angle difference into (-pi/2, pi/2].
double wrap_half_pi(double a);

}  // namespace coopdet
