"""Exponent budget for the sup-norm gain.

A perturbation of size delta = h^alpha at spatial scale h^beta buys a gain
Gamma' over the baseline exponent (1 - d)/2. The arithmetic is exact, so the
numbers printed here are rationals rather than floats.
"""

from fractions import Fraction

from semitorus.expstats import FeasibilityError, gamma_prime, optimize_gamma_prime


def main():
    print("Budget at (alpha, beta) = (5/7, 2/7):")
    for d in (1, 2, 3):
        b = gamma_prime(Fraction(5, 7), Fraction(2, 7), d)
        print(f"  d={d}: Gamma={b.Gamma}  Gamma'={b.GammaPrime}  sup-norm exponent {b.supnorm_exponent}")

    print("\nBest choice of (alpha, beta) per dimension, by vertex enumeration:")
    for d in (2, 3):
        o = optimize_gamma_prime(d)
        print(f"  d={d}: alpha={o['alpha']} beta={o['beta']} Gamma'={o['GammaPrime']}"
              f"  (float search: {o['float_check']['GammaPrime']:.5f})")

    print("\nAn infeasible pair is rejected with the inequality it breaks:")
    try:
        gamma_prime("1/2", "1/4", 2)
    except FeasibilityError as e:
        print(f"  {e}")


if __name__ == "__main__":
    main()
