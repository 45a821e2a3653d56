#pragma once

#include <stdexcept>
#include <string>

namespace glg {

// Input shapes that cannot be processed (non-square image, mismatched subband
// sizes, unequal dimensions in a comparison).
struct dimension_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tree structure violates a structural precondition (e.g. a node with exactly
// one child, which the moment estimators cannot handle).
struct topology_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Estimation cannot proceed (e.g. every level of the moment estimates is
// invalid); carries a human-readable diagnostic.
struct estimation_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A numeric computation produced non-finite intermediate values.
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// File parsing / serialization failures.
struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace glg
