#include "epn/special.hpp"

#include <cmath>
#include <stdexcept>

namespace epn {

namespace {

// Lanczos g = 7, 9 coefficients (Godfrey/Numerical Recipes set).
constexpr double kLanczosG = 7.0;
constexpr double kLanczos[9] = {
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
};

constexpr double kHalfLogTwoPi = 0.91893853320467274178;  // log(2*pi)/2

}  // namespace

double log_gamma(double x) {
  if (!(x > 0.0)) throw std::domain_error("log_gamma: requires x > 0");
  if (x < 0.5) {
    // Reflection: Gamma(x) Gamma(1-x) = pi / sin(pi x)
    return std::log(M_PI / std::sin(M_PI * x)) - log_gamma(1.0 - x);
  }
  const double z = x - 1.0;
  double a = kLanczos[0];
  for (int i = 1; i < 9; ++i) a += kLanczos[i] / (z + i);
  const double t = z + kLanczosG + 0.5;
  return kHalfLogTwoPi + (z + 0.5) * std::log(t) - t + std::log(a);
}

double digamma(double x) {
  if (!(x > 0.0)) throw std::domain_error("digamma: requires x > 0");
  double result = 0.0;
  while (x < 6.0) {  // psi(x) = psi(x+1) - 1/x
    result -= 1.0 / x;
    x += 1.0;
  }
  // Asymptotic series psi(x) ~ ln x - 1/(2x) - sum B_2k / (2k x^{2k})
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  result += std::log(x) - 0.5 * inv -
            inv2 * (1.0 / 12.0 -
                    inv2 * (1.0 / 120.0 -
                            inv2 * (1.0 / 252.0 -
                                    inv2 * (1.0 / 240.0 -
                                            inv2 * (1.0 / 132.0 -
                                                    inv2 * 691.0 / 32760.0)))));
  return result;
}

double trigamma(double x) {
  if (!(x > 0.0)) throw std::domain_error("trigamma: requires x > 0");
  double result = 0.0;
  while (x < 6.0) {  // psi'(x) = psi'(x+1) + 1/x^2
    result += 1.0 / (x * x);
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  // psi'(x) ~ 1/x + 1/(2x^2) + sum B_2k / x^{2k+1}
  result += inv * (1.0 + inv * (0.5 +
                                inv * (1.0 / 6.0 -
                                       inv2 * (1.0 / 30.0 -
                                               inv2 * (1.0 / 42.0 -
                                                       inv2 * (1.0 / 30.0 -
                                                               inv2 * 5.0 / 66.0))))));
  return result;
}

}  // namespace epn
