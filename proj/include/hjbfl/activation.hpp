#pragma once

#include <cmath>
#include <string>

#include "hjbfl/core_types.hpp"

namespace hjbfl {

enum class Activation { SinCos, Tanh };

inline std::string to_string(Activation a) { return a == Activation::SinCos ? "sincos" : "tanh"; }

inline Activation parse_activation(const std::string& name) {
  if (name == "sincos") return Activation::SinCos;
  if (name == "tanh") return Activation::Tanh;
  throw ConfigError("unknown activation '" + name + "'");
}

/// Derivative of the given order (0..4) of the activation at x.
/// sincos: sigma = sin + cos, so sigma'' = -sigma and the derivatives cycle with period 4.
inline double activation(Activation kind, double x, int order = 0) {
  if (kind == Activation::SinCos) {
    const double s = std::sin(x);
    const double c = std::cos(x);
    switch (order & 3) {
      case 0: return s + c;
      case 1: return c - s;
      case 2: return -s - c;
      default: return s - c;
    }
  }
  const double s = std::tanh(x);
  const double d1 = 1.0 - s * s;
  switch (order) {
    case 0: return s;
    case 1: return d1;
    case 2: return -2.0 * s * d1;
    case 3: return -2.0 * d1 * (1.0 - 3.0 * s * s);
    case 4: return 8.0 * s * d1 * (2.0 - 3.0 * s * s);
    default: throw CapabilityError("activation: derivative order above 4");
  }
}

}  // namespace hjbfl
