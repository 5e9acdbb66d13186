#pragma once

#include <stdexcept>
#include <string>

namespace cluscast {

/// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// core data
struct ZeroVariance : Error { using Error::Error; };
struct EmptyDimension : Error { using Error::Error; };
struct DimensionMismatch : Error { using Error::Error; };
struct SplitTooLong : Error { using Error::Error; };

// gp / mixture fitting
struct NotPositiveDefinite : Error { using Error::Error; };
struct EmptyIndividual : Error { using Error::Error; };
struct UnsupportedMultivariate : Error { using Error::Error; };
struct IndexOutOfRange : Error { using Error::Error; };

// deep generative model
struct InvalidGamma : Error { using Error::Error; };
struct NonFiniteLoss : Error { using Error::Error; };
struct IncompleteSeries : Error { using Error::Error; };

// metrics / baselines
struct EmptyHistory : Error { using Error::Error; };
struct LengthMismatch : Error { using Error::Error; };
struct EmptyInput : Error { using Error::Error; };
struct TimeOutOfRange : Error { using Error::Error; };

// benchmark runner
struct ConfigInvalid : Error { using Error::Error; };
struct DataLoadError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };

}  // namespace cluscast
