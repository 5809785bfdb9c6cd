// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "diffora/errors.hpp"

#include <utility>

namespace diffora {

const char* to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::dimension: return "dimension error";
    case ErrorKind::shape: return "shape error";
    case ErrorKind::definiteness: return "definiteness error";
    case ErrorKind::rank: return "rank error";
    case ErrorKind::configuration: return "configuration error";
    case ErrorKind::data: return "data error";
    case ErrorKind::divergence: return "divergence error";
    case ErrorKind::normalization: return "normalization error";
    case ErrorKind::domain: return "domain error";
    case ErrorKind::parse: return "parse error";
    case ErrorKind::sharing: return "sharing error";
    case ErrorKind::feasibility: return "feasibility error";
    case ErrorKind::io: return "i/o error";
    }
    return "error";
}

Error::Error(ErrorKind kind, const std::string& what)
    : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

DefinitenessError::DefinitenessError(const std::string& what, double eigenvalue)
    : Error(ErrorKind::definiteness, what + " (eigenvalue " + std::to_string(eigenvalue) + ")"),
      eigenvalue_(eigenvalue) {}

DivergenceError::DivergenceError(const std::string& what, std::size_t step, std::vector<double> last_finite_losses)
    : Error(ErrorKind::divergence, what + " at step " + std::to_string(step)),
      step_(step),
      last_losses_(std::move(last_finite_losses)) {}

ParseError::ParseError(const std::string& what, std::size_t line)
    : Error(ErrorKind::parse, "line " + std::to_string(line) + ": " + what), line_(line) {}

}  // namespace diffora
