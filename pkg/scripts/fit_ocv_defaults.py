#!/usr/bin/env python3
"""One-off fit of the default electrode open-circuit-voltage polynomials.

Fits degree-5 polynomials to a hand-tabulated Li-ion half-cell OCV shape
(layered-oxide cathode, graphite anode vs Li) and prints the coefficient
tuples frozen into vphm.physics. Re-run only if the default curves change.
"""

import numpy as np

Z = np.array([0.00, 0.05, 0.10, 0.20, 0.30, 0.40, 0.50,
              0.60, 0.70, 0.80, 0.90, 0.95, 1.00])

# cathode potential vs Li as a function of cell state of charge
V_POS = np.array([3.45, 3.53, 3.59, 3.66, 3.71, 3.75, 3.79,
                  3.84, 3.90, 3.98, 4.08, 4.16, 4.28])

# graphite anode potential vs Li (drops steeply near empty)
V_NEG = np.array([0.60, 0.32, 0.22, 0.17, 0.145, 0.13, 0.12,
                  0.115, 0.105, 0.095, 0.088, 0.085, 0.082])


def main():
    deg = 5
    cp = np.polyfit(Z, V_POS, deg)[::-1]  # ascending order
    cn = np.polyfit(Z, V_NEG, deg)[::-1]

    zs = np.linspace(0.0, 1.0, 401)
    vp = np.polyval(cp[::-1], zs)
    vn = np.polyval(cn[::-1], zs)
    cell = vp - vn
    dcell = np.diff(cell)
    print("cell OCV at z=1:", cell[-1])
    print("cell OCV at z=0:", cell[0])
    print("monotone increasing:", bool(np.all(dcell > 0)))
    print("max |fit err| pos:", np.max(np.abs(np.polyval(cp[::-1], Z) - V_POS)))
    print("max |fit err| neg:", np.max(np.abs(np.polyval(cn[::-1], Z) - V_NEG)))
    print("OCV_COEFFS_P =", tuple(round(c, 6) for c in cp))
    print("OCV_COEFFS_N =", tuple(round(c, 6) for c in cn))


if __name__ == "__main__":
    main()
