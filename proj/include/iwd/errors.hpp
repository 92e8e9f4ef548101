#pragma once

#include <stdexcept>
#include <string>

namespace iwd {

// Error categories map 1:1 onto C API status codes and CLI exit codes:
// validation -> 2, numeric/convergence -> 3, io -> 4.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ValidationError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

struct ConvergenceError : NumericError {
    ConvergenceError(const std::string& msg, double marginal_error, int iterations)
        : NumericError(msg), final_marginal_error(marginal_error), iterations_used(iterations) {}
    double final_marginal_error;
    int iterations_used;
};

struct IoError : Error {
    using Error::Error;
};

} // namespace iwd
