"""Regenerate the bundled mini-catalog (src/quakecast/data/mini_catalog.csv)."""

import argparse
from pathlib import Path

from quakecast.catalog import write_catalog
from quakecast.synthetic import mini_catalog_events

DEFAULT_OUT = Path(__file__).resolve().parents[1] / "src" / "quakecast" / "data" / "mini_catalog.csv"

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--out", type=Path, default=DEFAULT_OUT)
    args = ap.parse_args()
    events = mini_catalog_events(args.seed)
    write_catalog(events, args.out)
    print(f"wrote {len(events)} events to {args.out}")
