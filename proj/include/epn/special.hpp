#ifndef EPN_SPECIAL_HPP
#define EPN_SPECIAL_HPP

namespace epn {

/// log Gamma(x) for x > 0, Lanczos approximation (g = 7, 9 coefficients).
double log_gamma(double x);

/// Digamma psi(x) for x > 0; recurrence shift to x >= 6 plus asymptotic series.
double digamma(double x);

/// Trigamma psi'(x) for x > 0; same shift-then-series scheme as digamma.
double trigamma(double x);

}  // namespace epn

#endif  // EPN_SPECIAL_HPP
