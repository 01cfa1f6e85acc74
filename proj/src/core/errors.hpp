#pragma once

#include <stdexcept>

namespace dm {

// A referenced input file is absent (exit code 3 at the CLI boundary).
struct MissingArtifactError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Computation produced non-finite values (exit code 4 at the CLI boundary).
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace dm
