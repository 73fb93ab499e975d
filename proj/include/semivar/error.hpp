#pragma once

#include <stdexcept>
#include <string>

namespace semivar {

// Invalid user-supplied configuration (bad proportion, empty ontology, ...).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input file. Message carries line/field diagnostics.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A documented precondition of an operation was violated by the caller.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// The request is well-formed but beyond what this build can do
// (enumeration budget exceeded, latent space too large, ...).
class CapabilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace semivar
