"""Full Southern California run on a real catalog, then the feature ablation.

Fetch a catalog first (USGS ComCat CSV export, M >= 3.29 is enough for the
series, but the nowcast needs the small events too), for example:

    curl -o socal.csv "https://earthquake.usgs.gov/fdsnws/event/1/query?format=csv&starttime=1986-01-01&endtime=2024-05-01&minlatitude=32&maxlatitude=36&minlongitude=-120&maxlongitude=-114&minmagnitude=2"
"""

import argparse
import json
import logging
from pathlib import Path

from quakecast.experiments import feature_ablation, socal_config, socal_reproduction

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--catalog", type=Path, required=True)
    ap.add_argument("--out", type=Path, default=Path("runs/socal"))
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--skip-ablation", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    cfg = socal_config(args.catalog, args.out, epochs=args.epochs, seed=args.seed)
    result = socal_reproduction(cfg)
    print(f"{result.n_periods} periods, {result.n_active} active bins")
    for name, r in sorted(result.reports.items()):
        print(f"{name:14s} NSE {r.nse:+.4f}  NNSE {r.nnse:.4f}  MSE {r.mse:.6g}")

    if not args.skip_ablation:
        losses = feature_ablation(cfg)
        (args.out / "ablation.json").write_text(json.dumps(losses, indent=2, sort_keys=True) + "\n")
        for kind, by_set in losses.items():
            for name, loss in by_set.items():
                print(f"ablation {kind:10s} {name:18s} final train loss {loss:.6g}")
