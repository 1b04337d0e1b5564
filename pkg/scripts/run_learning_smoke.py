#!/usr/bin/env python3
"""Learning smoke: 3v3 runs over several seeds, reporting the median of the
per-seed peak rolling win rates and each seed's steps to the 0.8 threshold."""
import argparse
import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from spectra import experiments as X


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--steps", type=int, default=X.SMOKE_STEP_BUDGET)
    parser.add_argument("--threshold", type=float, default=X.SMOKE_WIN_RATE)
    parser.add_argument("--workers", type=int, default=2)
    parser.add_argument("--out", default="results/smoke")
    args = parser.parse_args()

    jobs = [{"kind": "smoke", "seed": s, "total_steps": args.steps,
             "threshold": args.threshold,
             "out_dir": os.path.join(args.out, f"seed{s}")}
            for s in range(args.seeds)]
    results = X.run_jobs(jobs, workers=args.workers)

    best = sorted(r["best_win_rate"] for r in results)
    med_best = X.median(best)
    reached = [r["steps_to_threshold"] for r in results]
    summary = {
        "seeds": args.seeds, "budget": args.steps, "threshold": args.threshold,
        "per_seed_best_win_rate": best,
        "median_best_win_rate": med_best,
        "steps_to_threshold": reached,
        "median_steps_to_threshold": X.median(X.censored(results, args.steps)),
        "passed": med_best >= args.threshold,
        "runs": results,
    }
    X.write_summary(os.path.join(args.out, "summary.json"), summary)
    for r in results:
        print(f"seed {r['seed']}: best {r['best_win_rate']:.2f}  "
              f"steps_to_{args.threshold} {r['steps_to_threshold']}")
    print(f"median best win rate: {med_best:.2f}  "
          f"({'PASS' if summary['passed'] else 'FAIL'} at {args.threshold})")
    print(json.dumps({k: summary[k] for k in ("median_best_win_rate", "passed")}))
    return 0 if summary["passed"] else 1


if __name__ == "__main__":
    raise SystemExit(main())
