"""Train every model family on a synthetic AR(1) panel and compare with persistence."""

import argparse

from quakecast.experiments import ar1_sanity

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rho", type=float, default=0.8)
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    res = ar1_sanity(rho=args.rho, epochs=args.epochs, seed=args.seed)
    print(f"rho {res.rho}: persistence NNSE should be {res.expected_persistence_nnse:.4f}")
    for name, r in res.reports.items():
        print(f"{name:12s} NSE {r.nse:+.4f}  NNSE {r.nnse:.4f}")
