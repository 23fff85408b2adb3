"""Print status, flags and headline fits for every manifest under a runs directory.

Usage: python3 scripts/summarize_runs.py [runs]
"""
from __future__ import annotations

import sys
from pathlib import Path

from mflab.manifest import load_manifest, verify_files


def main(root: str = "runs") -> int:
    for path in sorted(Path(root).glob("*/manifest.json")):
        m = load_manifest(path)
        wall = "-" if m.wall_clock_s is None else f"{m.wall_clock_s:.1f}s"
        print(f"== {m.experiment}  status={m.status}  seed={m.seed}  wall={wall}")
        for k, v in m.flags.items():
            print(f"   flag  {k}: {v}")
        for k, v in m.fits.items():
            if isinstance(v, dict):
                bits = [f"{a}={x:.4g}" if isinstance(x, float) else f"{a}={x}"
                        for a, x in v.items() if not isinstance(x, (list, dict))]
                print(f"   fit   {k}: " + ", ".join(bits))
            else:
                print(f"   fit   {k}: {v}")
        for problem in verify_files(path.parent, m):
            print(f"   WARNING {problem}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main(*sys.argv[1:]))
