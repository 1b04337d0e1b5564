"""Command-line entry point.

Subcommands: train, eval, curriculum, transfer, props, bench, export-attn.
Every run writes all of its outputs under one directory beneath the results
root (``SPECTRA_RESULTS_DIR`` or ``./results``) together with a manifest
recording the resolved config, seeds, and parameter content hashes.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys

import numpy as np

from . import agent as A
from . import bench as B
from . import checkpoint as ckpt
from . import config as C
from . import env as E
from . import trainer as T
from .autodiff import no_grad
from .layers import saqa_forward


def results_root() -> str:
    return os.environ.get("SPECTRA_RESULTS_DIR", "results")


def make_run_dir(command: str, tag: str) -> str:
    digest = hashlib.sha256(tag.encode()).hexdigest()[:10]
    run_id = f"{command}-{digest}"
    path = os.path.join(results_root(), run_id)
    os.makedirs(path, exist_ok=True)
    return path


def write_manifest(run_dir: str, command: str, snapshot: dict, seeds: list[int],
                   hashes: dict[str, str], outputs: list[str]) -> None:
    manifest = {
        "run_id": os.path.basename(run_dir),
        "command": command,
        "config": snapshot,
        "seeds": seeds,
        "param_hashes": hashes,
        "outputs": sorted(os.path.relpath(p, run_dir) for p in outputs),
    }
    with open(os.path.join(run_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _load_sections(args) -> dict:
    sections = C.load_config(args.config)
    if getattr(args, "agent", None):
        sections.setdefault("train", {})["agent"] = args.agent
    if getattr(args, "mixer", None):
        sections.setdefault("train", {})["mixer"] = args.mixer
    if getattr(args, "seed", None) is not None:
        sections.setdefault("train", {})["seed"] = str(args.seed)
    C.apply_overrides(sections, args.set or [])
    return sections


def cmd_train(args, command="train") -> int:
    sections = _load_sections(args)
    cfg = C.build_train_config(sections)
    if command == "curriculum" and len(cfg.stages) < 2:
        print("curriculum needs at least two [stage.N] sections", file=sys.stderr)
        return 1
    snapshot = C.config_snapshot(sections)
    run_dir = args.out or make_run_dir(command, json.dumps(snapshot, sort_keys=True))
    art = T.train(cfg, run_dir)
    write_manifest(run_dir, command, snapshot, [cfg.seed],
                   {"final": art.param_hash},
                   [art.metrics_path, art.checkpoint_path])
    print(f"run dir: {run_dir}")
    print(f"episodes: {art.episodes}  env steps: {art.env_steps}  "
          f"final win rate: {art.final_win_rate:.3f}")
    return 0


def cmd_transfer(args) -> int:
    sections = _load_sections(args)
    cfg = C.build_train_config(sections)
    agent_params, mixer_kind, mixer_params, meta = T.transfer_load(
        args.checkpoint, cfg.stages[0].env_cfg)
    if mixer_kind != cfg.mixer_kind:
        print(f"checkpoint mixer {mixer_kind!r} != config mixer "
              f"{cfg.mixer_kind!r}", file=sys.stderr)
        return 1
    snapshot = C.config_snapshot(sections)
    run_dir = args.out or make_run_dir("transfer",
                                       json.dumps(snapshot, sort_keys=True) + args.checkpoint)
    art = T.train(cfg, run_dir, initial_params=(agent_params, mixer_params))
    write_manifest(run_dir, "transfer", snapshot, [cfg.seed],
                   {"final": art.param_hash},
                   [art.metrics_path, art.checkpoint_path])
    print(f"run dir: {run_dir}")
    print(f"fine-tuned from {args.checkpoint}: final win rate {art.final_win_rate:.3f}")
    return 0


def cmd_eval(args) -> int:
    sections = _load_sections(args)
    env_cfg = C.build_env_config(sections.get("env", {}))
    agent_params, mixer_kind, _, _ = T.transfer_load(args.checkpoint, env_cfg)
    report = T.evaluate(env_cfg, agent_params, episodes=args.episodes,
                        seed0=args.episode_seed)
    print(json.dumps(report, indent=2))
    return 0


def _parse_sizes(text: str) -> list[tuple[int, int]]:
    sizes = []
    for part in text.split(","):
        m, _, n = part.strip().partition("x")
        sizes.append((int(m), int(n)))
    return sizes


def cmd_props(args) -> int:
    sizes = _parse_sizes(args.sizes)
    run_dir = args.out or make_run_dir("props", f"{args.seeds}-{args.sizes}-{args.jobs}")
    if args.jobs > 1:
        reports = _props_parallel(args.seeds, sizes, args.jobs)
    else:
        reports = B.check_propositions(args.seeds, sizes)
    reports.append(B.qmix_invariance_report(trials=100))
    mono = B.monotonicity_report(instances=args.monotonicity_instances)

    json_path = os.path.join(run_dir, "prop_reports.json")
    with open(json_path, "w") as fh:
        json.dump({"reports": [r.to_dict() for r in reports],
                   "monotonicity": mono}, fh, indent=2)
    csv_path = os.path.join(run_dir, "prop_reports.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(reports[0].to_dict()))
        writer.writeheader()
        for rep in reports:
            writer.writerow(rep.to_dict())
    write_manifest(run_dir, "props", {"sizes": args.sizes, "seeds": args.seeds},
                   list(range(args.seeds)), {}, [json_path, csv_path])

    failed = False
    for rep in reports:
        expect_fail = rep.prop_id.endswith("[qmix-baseline]")
        ok = (not rep.passed) if expect_fail else rep.passed
        status = "ok" if ok else "FAIL"
        print(f"{status:4s} {rep.prop_id}: max deviation {rep.max_abs_deviation:.3e} "
              f"over {rep.permutations} permutations")
        failed |= not ok
    mono_ok = mono["violations"] == 0
    print(f"{'ok' if mono_ok else 'FAIL':4s} mixer-monotonicity: "
          f"{mono['violations']} violations over {mono['instances']} instances")
    print(f"reports: {json_path}")
    return 1 if (failed or not mono_ok) else 0


def _props_parallel(seeds: int, sizes, jobs: int):
    from multiprocessing import Pool
    step = max(1, -(-seeds // jobs))
    ranges = [range(lo, min(lo + step, seeds)) for lo in range(0, seeds, step)]
    with Pool(len(ranges)) as pool:
        parts = pool.starmap(B.check_propositions, [(r, sizes) for r in ranges])
    merged = {rep.prop_id: rep for rep in parts[0]}
    for part in parts[1:]:
        for rep in part:
            cur = merged[rep.prop_id]
            cur.instances += rep.instances
            cur.permutations += rep.permutations
            if rep.max_abs_deviation > cur.max_abs_deviation:
                cur.max_abs_deviation = rep.max_abs_deviation
                cur.counterexample_seed = rep.counterexample_seed
    return list(merged.values())


def cmd_bench(args) -> int:
    models = [m.strip() for m in args.models.split(",")]
    n_values = [int(n) for n in args.n.split(",")]
    run_dir = args.out or make_run_dir("bench", f"{args.models}-{args.n}-{args.samples}")
    rows = B.inference_bench(models, n_values, samples=args.samples)
    csv_path = os.path.join(run_dir, "inference_times.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["model", "n", "median_s", "iqr_s",
                                                "samples"])
        writer.writeheader()
        writer.writerows(rows)
    fits = [B.complexity_fit(layer, n_values if len(set(n_values)) >= 4
                             else [8, 16, 32, 64]).to_dict()
            for layer in ("saqa", "self_attention")]
    json_path = os.path.join(run_dir, "mac_fits.json")
    with open(json_path, "w") as fh:
        json.dump(fits, fh, indent=2)
    write_manifest(run_dir, "bench", {"models": args.models, "n": args.n},
                   [], {}, [csv_path, json_path])
    for row in rows:
        print(f"{row['model']:9s} n={row['n']:<4d} median {row['median_s'] * 1e6:8.1f} us  "
              f"iqr {row['iqr_s'] * 1e6:8.1f} us")
    print(f"outputs: {run_dir}")
    return 0


def cmd_export_attn(args) -> int:
    sections = C.load_config(args.config) if args.config else {}
    C.apply_overrides(sections, args.set or [])
    env_cfg = C.build_env_config(sections.get("env", {"m": "3", "e": "3"}))
    agent_params, mixer_kind, _, meta = T.transfer_load(args.checkpoint, env_cfg)
    if agent_params.attn is None or meta["agent_kind"] != "spectra":
        print("attention export needs a single-query attention agent", file=sys.stderr)
        return 1
    run_dir = args.out or make_run_dir("export-attn",
                                       f"{args.checkpoint}-{args.episode_seed}")
    csv_path = os.path.join(run_dir, "attention.csv")
    env = E.MicroBattleEnv(env_cfg)
    res = env.reset(args.episode_seed)
    hs = [np.zeros(agent_params.d_h) for _ in range(env_cfg.m)]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "agent", "head", "slot", "entity_id", "weight"])
        t = 0
        while not res.terminated:
            choices = []
            for i in range(env_cfg.m):
                attn: list = []
                q, h = A.agent_forward(agent_params, res.observations[i], hs[i],
                                       avail=res.avail[i], attn_out=attn)
                hs[i] = h.value[0]
                for head, weights in enumerate(attn):
                    for slot, weight in enumerate(weights[0]):
                        writer.writerow([t, i, head, slot,
                                         int(q.target_ids[slot]), f"{weight:.10f}"])
                choices.append(A.greedy_action(q))
            res = env.step(choices)
            t += 1
    write_manifest(run_dir, "export-attn", C.config_snapshot(sections),
                   [args.episode_seed], {}, [csv_path])
    print(f"wrote {csv_path} ({t} steps)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spectra",
        description="Scalable permutation-free multi-agent Q-learning")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_train_like(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True)
        p.add_argument("--agent", choices=A.AGENT_KINDS)
        p.add_argument("--mixer", choices=("vdn", "spectra", "qmix"))
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", metavar="SEC.KEY=VAL")
        p.add_argument("--out")
        return p

    add_train_like("train", "single-stage training run")
    add_train_like("curriculum", "multi-stage curriculum run")
    p = add_train_like("transfer", "fine-tune from a checkpoint")
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--episodes", type=int, default=64)
    p.add_argument("--episode-seed", type=int, default=10_000)
    p.add_argument("--set", action="append")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("props", help="permutation/monotonicity property harness")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--sizes", default="2x4,3x5,4x5,8x16")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--monotonicity-instances", type=int, default=1000)
    p.add_argument("--out")

    p = sub.add_parser("bench", help="inference timing + MAC complexity fits")
    p.add_argument("--models", default="spectra,sa,meanpool")
    p.add_argument("--n", default="8,16,32,64")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--out")

    p = sub.add_parser("export-attn", help="dump per-head attention weights")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episode-seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--set", action="append")
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args)
        if args.command == "curriculum":
            return cmd_train(args, command="curriculum")
        if args.command == "transfer":
            return cmd_transfer(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "props":
            return cmd_props(args)
        if args.command == "bench":
            return cmd_bench(args)
        if args.command == "export-attn":
            return cmd_export_attn(args)
    except (ValueError, FileNotFoundError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
