"""Tabulate the hand-designed filter responses next to a normalized Bernstein filter.

    python3 demos/filter_responses.py [out_dir]
"""
import os
import sys

import numpy as np

from gdflow.spectral import bernstein_response, closed_form_response, normalize_coefficients, write_response_csv

FILTERS = {
    "ppr": [0.2],
    "gnn-lf": [0.7, 0.5],
    "gnn-hf": [0.5, 0.4],
    "chebyshev": [0.5, -0.3, 0.2],
    "vanilla": [0.6, 0.3],
}


def main(out_dir="filter_responses"):
    os.makedirs(out_dir, exist_ok=True)
    lam = np.linspace(0.0, 1.0, 101)
    curves = {name: closed_form_response(name, params, lam) for name, params in FILTERS.items()}
    theta = normalize_coefficients(np.random.default_rng(0).standard_normal(9)).data
    curves["bernstein"] = bernstein_response(theta, lam)
    for name, resp in curves.items():
        write_response_csv(os.path.join(out_dir, f"{name}.csv"), lam, resp)
    print(f"{'lambda':>7} " + " ".join(f"{n:>10}" for n in curves))
    for i in range(0, 101, 10):
        print(f"{lam[i]:7.2f} " + " ".join(f"{curves[n][i]:10.4f}" for n in curves))


if __name__ == "__main__":
    main(*sys.argv[1:])
