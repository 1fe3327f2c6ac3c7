#!/usr/bin/env python3
"""Convert MATPOWER-style cases (as shipped by PYPOWER) into the JSON case format.

Usage: convert_matpower.py <pypower-dir> <out-dir>

Bus numbers are renumbered to 0..N-1 in ascending order of the original number.
Loads, generation and shunts are converted to per-unit on baseMVA, angles to radians.
"""
import json
import math
import sys


def convert(case):
    base = float(case["baseMVA"])
    bus, gen, branch = case["bus"], case["gen"], case["branch"]
    order = sorted(int(b[0]) for b in bus)
    index = {num: i for i, num in enumerate(order)}

    pg = [0.0] * len(order)
    qg = [0.0] * len(order)
    vset = {}
    for g in gen:
        if int(g[7]) <= 0:
            continue
        i = index[int(g[0])]
        pg[i] += g[1]
        qg[i] += g[2]
        vset.setdefault(i, float(g[5]))

    kinds = {1: "load", 2: "generator", 3: "slack"}
    buses = []
    for b in sorted(bus, key=lambda row: int(row[0])):
        i = index[int(b[0])]
        kind = kinds[int(b[1])]
        if kind == "generator" and i not in vset:
            kind = "load"
        entry = {
            "id": i,
            "kind": kind,
            "gs": b[4] / base,
            "bs": b[5] / base,
            "p": (pg[i] - b[2]) / base,
            "q": (qg[i] - b[3]) / base,
        }
        if kind != "load":
            entry["vset"] = vset.get(i, float(b[7]))
        buses.append(entry)

    branches = []
    for br in branch:
        if int(br[10]) <= 0:
            continue
        tap = float(br[8]) if br[8] != 0 else 1.0
        branches.append({
            "from": index[int(br[0])],
            "to": index[int(br[1])],
            "r": float(br[2]),
            "x": float(br[3]),
            "b": float(br[4]),
            "tap": tap,
            "shift": math.radians(float(br[9])),
        })
    return {"base_mva": base, "buses": buses, "branches": branches}


def main():
    src, out = sys.argv[1], sys.argv[2]
    sys.path.insert(0, src)
    import importlib

    for n in (14, 30, 118, 300):
        mod = importlib.import_module(f"pypower.case{n}")
        case = getattr(mod, f"case{n}")()
        with open(f"{out}/ieee{n}.json", "w") as fh:
            json.dump(convert(case), fh, indent=1)
            fh.write("\n")


if __name__ == "__main__":
    main()
