// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace diffora {

enum class ErrorKind {
    dimension,
    shape,
    definiteness,
    rank,
    configuration,
    data,
    divergence,
    normalization,
    domain,
    parse,
    sharing,
    feasibility,
    io,
};

const char* to_string(ErrorKind kind);

/// Base error for every failure raised by the library. The kind drives the
/// CLI exit-code mapping.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what);
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

class DefinitenessError : public Error {
public:
    DefinitenessError(const std::string& what, double eigenvalue);
    double eigenvalue() const noexcept { return eigenvalue_; }

private:
    double eigenvalue_;
};

class DivergenceError : public Error {
public:
    DivergenceError(const std::string& what, std::size_t step, std::vector<double> last_finite_losses);
    std::size_t step() const noexcept { return step_; }
    const std::vector<double>& last_finite_losses() const noexcept { return last_losses_; }

private:
    std::size_t step_;
    std::vector<double> last_losses_;
};

class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line);
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

}  // namespace diffora
