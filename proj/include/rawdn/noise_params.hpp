#pragma once

#include <string>

namespace rawdn {

/// Heteroscedastic Gaussian noise coefficients in normalized intensity units:
/// variance(y) = shot * y + read.
struct NoiseParams {
  double a = 0.0;   // shot (signal-dependent) coefficient
  double b = 0.0;   // read (signal-independent) variance
  std::string iso;  // optional level label

  bool operator==(const NoiseParams&) const = default;
};

}  // namespace rawdn
