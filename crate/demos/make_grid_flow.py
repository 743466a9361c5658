"""Writes grid_flow.json: a two-mode shuttle on [0, 0.05] with 400 cells.

Drift is +-1, so one cell is crossed every 1/8000 time units and every grid
with N dividing 8000 steps is aligned with the flow. The cost rate depends on
position; the minimizer pays to flip direction, the maximizer can boost.
"""
import json
import math
import sys

CELLS = 400
LENGTH = 0.05


def cost_profile(mode, cell):
    u = (cell + 0.5) / CELLS
    base = 0.75 + 0.5 * math.sin(math.pi * u)
    return base if mode == "right" else base + 0.25 * u


def build():
    states = {"grid_flow": {
        "modes": [{"name": "right", "drift": 1.0}, {"name": "left", "drift": -1.0}],
        "grid": {"min": 0.0, "max": LENGTH, "cells": CELLS},
        "boundary": "clamp",
    }}
    rates = [
        {"from": "right@*", "b": "flip", "to": "left@=", "rate": 12.0},
        {"from": "right@*", "b": "keep", "to": "left@=", "rate": 3.0},
        {"from": "left@*", "b": "flip", "to": "right@=", "rate": 12.0},
        {"from": "left@*", "b": "keep", "to": "right@=", "rate": 3.0},
    ]
    costs = []
    for mode in ("right", "left"):
        for cell in range(CELLS):
            c = cost_profile(mode, cell)
            state = f"{mode}@{cell}"
            costs += [
                {"state": state, "a": "boost", "b": "keep", "value": round(c + 1.0, 6)},
                {"state": state, "a": "boost", "b": "flip", "value": round(c + 0.25, 6)},
                {"state": state, "a": "idle", "b": "keep", "value": round(c, 6)},
                {"state": state, "a": "idle", "b": "flip", "value": round(c + 0.5, 6)},
            ]
    return {
        "lambda": 1.0,
        "horizon": 1.0,
        "states": states,
        "actions": [{"state": "*", "p1": ["boost", "idle"], "p2": ["flip", "keep"]}],
        "rates": rates,
        "costs": costs,
        "lyapunov": {"V": 1, "V1": 1, "rho1": 1, "b1": 0, "M1": 1, "M2": 25000, "kappa": 12,
                     "rho2": 1, "M3": 1, "b2": 1},
    }


if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "grid_flow.json"
    with open(out, "w") as f:
        json.dump(build(), f, indent=1)
        f.write("\n")
