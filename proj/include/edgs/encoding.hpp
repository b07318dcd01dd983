#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <vector>

namespace edgs {

/// Frequency encoding gamma(u) with L octaves per coordinate, coordinate-major:
/// [sin(2^0 pi u_0), cos(2^0 pi u_0), ..., sin(2^(L-1) pi u_0), cos(2^(L-1) pi u_0),
///  sin(2^0 pi u_1), ...]. Output length 2*L*|u|.
inline std::vector<double> positional_encoding(const std::vector<double>& u, std::size_t L) {
  std::vector<double> out;
  out.reserve(2 * L * u.size());
  for (double x : u) {
    double freq = std::numbers::pi;
    for (std::size_t j = 0; j < L; ++j) {
      out.push_back(std::sin(freq * x));
      out.push_back(std::cos(freq * x));
      freq *= 2.0;
    }
  }
  return out;
}

}  // namespace edgs
