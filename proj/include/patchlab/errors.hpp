#pragma once

#include <stdexcept>
#include <string>

namespace patchlab {

// Error hierarchy. Every category the library reports maps to one of these,
// so callers (and the CLI exit-code mapping) can dispatch on type.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};
struct IndexError : Error {
    using Error::Error;
};
struct ContractError : Error {
    using Error::Error;
};
struct LayoutError : Error {
    using Error::Error;
};
struct QueryError : Error {
    using Error::Error;
};
struct GeometryError : Error {
    using Error::Error;
};
struct HeadKindError : Error {
    using Error::Error;
};
struct TrainingError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct StageError : Error {
    using Error::Error;
};
struct FormatError : Error {
    using Error::Error;
};
struct ReportError : Error {
    using Error::Error;
};

}  // namespace patchlab
