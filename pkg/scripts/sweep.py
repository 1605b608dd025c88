#!/usr/bin/env python3
"""Run the masking or density sweep on a planted dataset and print MSE per sweep value.

Writes the planted data as JSON lines, then drives ``reviewbench sweep`` on it,
so the output CSV and manifest are the same as from the command line.

    python scripts/sweep.py mask --models bias,deepconn --out runs/mask
    python scripts/sweep.py density --models bias,mf --users 400 --items 120 --interactions 6000
"""

from __future__ import annotations

import argparse
import sys
from collections import defaultdict
from pathlib import Path

from reviewbench import synthetic
from reviewbench.cli import main as cli_main
from reviewbench.cli import read_csv


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("axis", choices=("mask", "density"))
    ap.add_argument("--models", default="bias,deepconn")
    ap.add_argument("--users", type=int, default=2000)
    ap.add_argument("--items", type=int, default=300)
    ap.add_argument("--interactions", type=int, default=40_000)
    ap.add_argument("--cold-items", type=int, default=150)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=None)
    ap.add_argument("--config", type=Path, default=Path(__file__).with_name("example.cfg"))
    # anything unrecognized is passed through to reviewbench, e.g. --k-max 5
    args, extra = ap.parse_known_args()
    out = args.out or Path("runs") / args.axis

    data = out / "planted.jsonl"
    if not data.exists():
        p = synthetic.planted(
            n_users=args.users,
            n_items=args.items,
            n_interactions=args.interactions,
            with_text=True,
            n_cold_items=args.cold_items,
            seed=args.seed,
        )
        out.mkdir(parents=True, exist_ok=True)
        synthetic.write_jsonl(p.dataset, data)

    code = cli_main(
        ["sweep", "--config", str(args.config), "--sweep", args.axis, "--data", str(data), "--out-dir", str(out),
         "--models", args.models, "--seeds", str(args.seed), *extra]  # fmt: skip
    )
    if code:
        return code

    table: dict[str, dict[str, str]] = defaultdict(dict)
    for row in read_csv(out / f"sweep_{args.axis}.csv", "sweep"):
        if row["model"]:
            table[row["value"]][row["model"]] = row["test_mse"]
    models = [m.strip() for m in args.models.split(",")]
    label = "mask %" if args.axis == "mask" else "k"
    print(f"{label:>8s} " + " ".join(f"{m:>10s}" for m in models))
    for value, cells in table.items():
        print(f"{value:>8s} " + " ".join(f"{float(cells[m]):10.4f}" if m in cells else f"{'':>10s}" for m in models))
    return 0


if __name__ == "__main__":
    sys.exit(main())
