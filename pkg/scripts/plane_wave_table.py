#!/usr/bin/env python3
"""Relative plane-wave error of the constant-field torus generator, for several n and alpha."""

import argparse
import math

import numpy as np

from stablehom import torus
from stablehom.field import FieldSpec, periodize, sample_environment
from stablehom.symbol import closed_form_values, compute_constants


def errors(n: int, alpha: float, kmax: int) -> np.ndarray:
    f = periodize(sample_environment(FieldSpec(dim=1, family="constant", base_matrix=[[1.0]])), 1.0)
    grid = torus.TorusGrid(1, 1.0, n)
    gen = torus.build_generator(f, grid, alpha)
    consts = compute_constants(1, alpha)
    x = grid.nodes[:, 0]
    out = []
    for k in range(1, kmax + 1):
        v = np.exp(2j * math.pi * k * x)
        lam = ((gen.Q @ v) / v)[0].real
        q = float(closed_form_values(np.eye(1), [2 * math.pi * k], consts))
        out.append(abs(-lam - q) / q)
    return np.array(out)


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--grids", type=int, nargs="+", default=[32, 64, 128, 256])
    p.add_argument("--alphas", type=float, nargs="+", default=[0.5, 1.0, 1.5])
    p.add_argument("--kmax", type=int, default=4)
    args = p.parse_args()
    print("alpha,n," + ",".join(f"k={k}" for k in range(1, args.kmax + 1)))
    for alpha in args.alphas:
        for n in args.grids:
            e = errors(n, alpha, args.kmax)
            print(f"{alpha:g},{n}," + ",".join(f"{v:.3e}" for v in e))


if __name__ == "__main__":
    main()
