#!/usr/bin/env python3
"""Regenerate the frozen NF4 codebook from a high-precision inverse-normal.

The 16 levels are standard-normal quantiles: 8 non-positive values at
equally spaced probabilities on the lower half (ending at the median,
which contributes the mandatory 0.0) and 8 positive values on the upper
half, each half divided by the magnitude of its extreme quantile so the
codebook spans exactly [-1, +1].

The tail probability uses the usual evenly-informative convention
delta = 1 - (1/2)((1 - 1/(2*15)) + (1 - 1/(2*16))), i.e. the offset
0.9677083 averaged from the 15- and 16-bucket half-grids.

Run with no arguments; prints the table as Python source at 17 significant
digits.  The output is frozen into medserve.quantizer.NF4_LEVELS and a test
re-runs this construction to guard the constants.
"""

import mpmath

mpmath.mp.dps = 50

OFFSET = (mpmath.mpf(1) - mpmath.mpf(1) / 30 + mpmath.mpf(1) - mpmath.mpf(1) / 32) / 2


def inverse_normal_cdf(p):
    # Phi^{-1}(p) = sqrt(2) * erfinv(2p - 1)
    return mpmath.sqrt(2) * mpmath.erfinv(2 * p - 1)


def nf4_table():
    delta = 1 - OFFSET
    half = mpmath.mpf("0.5")

    # Lower half: 8 probabilities from delta up to 0.5 inclusive -> 7 negative
    # quantiles plus the median's exact zero.
    lower_p = [delta + (half - delta) * i / 7 for i in range(8)]
    lower_q = [inverse_normal_cdf(p) for p in lower_p]
    lower = [q / abs(lower_q[0]) for q in lower_q]
    lower[-1] = mpmath.mpf(0)

    # Upper half: 8 probabilities strictly above 0.5, equally spaced out to
    # 1 - delta, giving 8 positive quantiles.
    upper_p = [half + (half - delta) * i / 8 for i in range(1, 9)]
    upper_q = [inverse_normal_cdf(p) for p in upper_p]
    upper = [q / upper_q[-1] for q in upper_q]

    return lower + upper


def main():
    # repr() of the correctly-rounded double is the shortest string that
    # parses back to the identical bits on every platform.
    table = nf4_table()
    print("NF4_LEVELS = (")
    for value in table:
        print(f"    {float(value)!r},")
    print(")")


if __name__ == "__main__":
    main()
