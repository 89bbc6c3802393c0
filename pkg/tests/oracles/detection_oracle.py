"""Arbitrary-precision detection probability of one pattern execution.

Written against the definition only (no sdcsim imports): each of ``n``
iterations lands in the faulty subset with probability ``rho`` and then
manifests with probability ``p``, independently, so

    P(detect) = 1 - (1 - rho * p) ** n

Usage: python detection_oracle.py RHO P N [--dps 60]
"""

import argparse

import mpmath


def detection_probability(rho, p, n, dps=60):
    with mpmath.workdps(dps):
        return 1 - (1 - mpmath.mpf(rho) * mpmath.mpf(p)) ** int(n)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("rho", type=float)
    ap.add_argument("p", type=float)
    ap.add_argument("n", type=int)
    ap.add_argument("--dps", type=int, default=60)
    args = ap.parse_args()
    print(mpmath.nstr(detection_probability(args.rho, args.p, args.n, args.dps), 30))


if __name__ == "__main__":
    main()
