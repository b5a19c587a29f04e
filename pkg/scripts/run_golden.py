#!/usr/bin/env python3
"""Run every versioned config in configs/ through its subcommand and summarize."""

import argparse
import json
import os
import sys
import time

from stablehom import cli

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SUITES = [
    ("constants_d2.toml", "constants"),
    ("golden_density.toml", "torus"),
    ("golden_density.toml", "verify-density"),
    ("abp.toml", "verify-abp"),
    ("golden_mollify.toml", "verify-mollify"),
    ("golden_birkhoff.toml", "verify-birkhoff"),
    ("simulate_2d.toml", "simulate"),
    ("golden_clt.toml", "verify-clt"),
]


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default=os.path.join(ROOT, "runs"))
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--skip", nargs="*", default=[], help="subcommands to skip, e.g. verify-clt")
    args = p.parse_args(argv)
    worst = 0
    for cfg_name, command in SUITES:
        if command in args.skip:
            continue
        cfg = cli.parse_config(os.path.join(ROOT, "configs", cfg_name), is_text=False)
        out = os.path.join(args.out, f"{os.path.splitext(cfg_name)[0]}-{command}")
        t0 = time.perf_counter()
        code = cli.run(cfg, command, out, args.workers)
        dt = time.perf_counter() - t0
        note = ""
        report = os.path.join(out, "report.json")
        if os.path.exists(report):
            with open(report) as fh:
                rep = json.load(fh)
            bad = [m["name"] for m in rep["metrics"] if m["kind"] == "soft" and m["passed"] is False]
            note = f"  soft warnings: {len(bad)}" if bad else ""
        print(f"{command:16s} {cfg_name:22s} exit {code}  {dt:7.1f}s{note}")
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(main())
