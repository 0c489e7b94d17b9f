"""Rebuild tests/data/oracle_frozen.json from the reference solvers in oracles.py.

Run from the repository root: ``python3 tests/regenerate_oracles.py``.
"""

import json
from pathlib import Path

import numpy as np

from oracles import fista_adaptive_lasso, grid_fused_lasso

OUT = Path(__file__).parent / "data" / "oracle_frozen.json"


def adaptive_instances(n_inst=24, seed=11):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_inst):
        N = int(rng.integers(15, 31))
        P = int(rng.integers(2, 5))
        X = np.column_stack([np.ones(N), rng.normal(size=(N, P - 1)) * rng.uniform(0.5, 2, P - 1)])
        beta = rng.normal(size=P) * 0.8
        y = (rng.random(N) < 1 / (1 + np.exp(-X @ beta))).astype(float)
        if y.min() == y.max():
            y[0] = 1 - y[0]
        unpen = np.zeros(P, bool)
        unpen[0] = True
        w = rng.uniform(0.2, 3.0, P)
        lam = float(np.exp(rng.uniform(np.log(0.005), np.log(0.3))))
        coef, obj = fista_adaptive_lasso(X, y, unpen, w, lam)
        out.append({"X": X.tolist(), "y": y.tolist(), "unpen": unpen.tolist(), "w": w.tolist(), "lam": lam,
                     "coef": coef.tolist(), "objective": obj})
    return out


def fused_instances(n_inst=22, seed=12):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_inst):
        N = int(rng.integers(20, 31))
        P = int(rng.integers(3, 5))
        X = np.column_stack([np.ones(N), rng.normal(size=(N, P - 1))])
        beta = np.concatenate([[rng.normal() * 0.3], np.round(rng.normal(size=P - 1), 0) * 0.7])
        y = (rng.random(N) < 1 / (1 + np.exp(-X @ beta))).astype(float)
        if y.min() == y.max():
            y[0] = 1 - y[0]
        pen = list(range(1, P))
        edges = [(u, v) for k, u in enumerate(pen) for v in pen[k + 1:]]
        if i % 2:
            edges = [(pen[k], pen[k + 1]) for k in range(len(pen) - 1)]
        w = rng.uniform(0.3, 2.0, len(edges))
        lam1 = float(np.exp(rng.uniform(np.log(0.01), np.log(0.3))))
        coef, obj = grid_fused_lasso(X, y, edges, w, lam1)
        out.append({"X": X.tolist(), "y": y.tolist(), "edges": edges, "w": w.tolist(), "lam1": lam1,
                    "coef": coef.tolist(), "objective": obj})
    return out


if __name__ == "__main__":
    data = {"adaptive": adaptive_instances(), "fused": fused_instances()}
    OUT.write_text(json.dumps(data, indent=1) + "\n")
    print(f"wrote {OUT}")
