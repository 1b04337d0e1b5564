#!/usr/bin/env python3
"""Curriculum/transfer ordering: paired 6v6 runs per seed (from-scratch,
30/70 curriculum, 3v3-pretrain fine-tune), comparing median steps to the
6v6 win-rate threshold. Runs that never reach it are censored at the budget."""
import argparse
import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from spectra import experiments as X


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--steps", type=int, default=X.CURRICULUM_STEP_BUDGET)
    parser.add_argument("--threshold", type=float, default=X.CURRICULUM_WIN_RATE)
    parser.add_argument("--pretrain-steps", type=int, default=60_000)
    parser.add_argument("--workers", type=int, default=2)
    parser.add_argument("--out", default="results/curriculum")
    args = parser.parse_args()

    jobs = []
    for kind in ("scratch6", "curriculum", "transfer"):
        for s in range(args.seeds):
            jobs.append({"kind": kind, "seed": s, "total_steps": args.steps,
                         "threshold": args.threshold,
                         "pretrain_steps": args.pretrain_steps,
                         "out_dir": os.path.join(args.out, f"{kind}_seed{s}")})
    results = X.run_jobs(jobs, workers=args.workers)

    by_kind = {}
    for r in results:
        by_kind.setdefault(r["kind"], []).append(r)
    medians = {kind: X.median(X.censored(rs, args.steps))
               for kind, rs in by_kind.items()}
    summary = {
        "seeds": args.seeds, "budget": args.steps, "threshold": args.threshold,
        "median_steps_to_threshold": medians,
        "curriculum_ok": medians["curriculum"] <= medians["scratch6"],
        "transfer_ok": medians["transfer"] <= medians["scratch6"],
        "runs": results,
    }
    X.write_summary(os.path.join(args.out, "summary.json"), summary)
    for kind in ("scratch6", "curriculum", "transfer"):
        per_seed = [r["steps_to_threshold"] for r in by_kind[kind]]
        print(f"{kind:11s} median steps to {args.threshold}: "
              f"{medians[kind]:.0f}  per-seed {per_seed}")
    okay = summary["curriculum_ok"] and summary["transfer_ok"]
    print(f"ordering: {'PASS' if okay else 'FAIL'}")
    print(json.dumps(medians))
    return 0 if okay else 1


if __name__ == "__main__":
    raise SystemExit(main())
