#pragma once

#include <stdexcept>
#include <string>

namespace gridvl {

// Error taxonomy used across the library. All derive from std::runtime_error
// so callers can catch coarsely; the distinct types exist for tests and for
// CLI exit-code mapping.

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct VocabError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CatalogError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A pipeline stage body failed; the message names the stage and where the
// completed artifacts live so the run can resume.
struct StageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace gridvl
