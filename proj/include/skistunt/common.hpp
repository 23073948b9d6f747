#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace skistunt {

inline constexpr double kPi = std::numbers::pi;

constexpr double deg2rad(double deg) { return deg * kPi / 180.0; }
constexpr double rad2deg(double rad) { return rad * 180.0 / kPi; }

inline double clamp(double x, double lo, double hi) {
  return x < lo ? lo : (x > hi ? hi : x);
}

// Wraps an angle difference into [-pi, pi].
inline double wrap_pi(double a) { return std::remainder(a, 2.0 * kPi); }

// Thrown when a config or constructor precondition is violated.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

}  // namespace skistunt
