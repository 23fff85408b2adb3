"""Run every experiment config in ``configs/`` in sequence.

Usage: python3 scripts/run_all.py [--out runs] [--threads 8] [--only exp_chaos_scaling ...]
"""
from __future__ import annotations

import argparse
import time
from pathlib import Path

from mflab.cli import main as mflab

ROOT = Path(__file__).resolve().parent.parent


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--only", nargs="*", default=None)
    args = ap.parse_args()
    worst = 0
    for cfg in sorted((ROOT / "configs").glob("exp_*.yaml")):
        if args.only and cfg.stem not in args.only:
            continue
        t0 = time.perf_counter()
        code = mflab(["run", str(cfg), "--set", f"output_dir={Path(args.out) / cfg.stem}",
                      "--set", f"threads={args.threads}"])
        print(f"{cfg.stem:26s} exit {code}  {time.perf_counter() - t0:8.1f} s", flush=True)
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    raise SystemExit(main())
