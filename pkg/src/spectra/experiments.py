"""Multi-seed experiment recipes: learning smoke, curriculum, transfer.

The recipes here are the calibrated desk-scale setups used by the scripts in
``scripts/`` and by the acceptance suite. Runs are independent processes, so
seeds can execute in parallel on separate cores.
"""
from __future__ import annotations

import json
import os
from dataclasses import replace
from multiprocessing import get_context

from . import env as E
from . import trainer as T

# High-lethality units: fights resolve in a few volleys, and the scripted
# opponent's all-on-nearest volleys waste most of their damage to overkill,
# which is exactly the coordination edge the learner can exploit. Full sight
# is the standard full-observability evaluation setting.
GLASS_UNIT_STATS = {
    "skirmisher": E.UnitStats(hp_max=16.0, attack_range=5.0, damage=16.0),
    "bruiser": E.UnitStats(hp_max=32.0, attack_range=3.2, damage=32.0),
}

SMOKE_WIN_RATE = 0.8
SMOKE_STEP_BUDGET = 200_000
CURRICULUM_WIN_RATE = 0.5
CURRICULUM_STEP_BUDGET = 240_000


def battle_env(m: int, e: int, seed: int = 0) -> E.EnvConfig:
    return E.EnvConfig(m=m, e=e, arena=8.0, sight_range=9.0, max_steps=40,
                       seed=seed, unit_stats=dict(GLASS_UNIT_STATS))


EPS_ANNEAL_STEPS = 18_000       # absolute; converted to the config's fraction


def _base_train(stages, total_steps, seed) -> T.TrainConfig:
    # episodes are only a few steps long here, so updates are spaced out in
    # episode units to keep the updates-per-env-step ratio sane
    return T.TrainConfig(
        stages=stages, total_steps=total_steps,
        agent_kind="spectra", mixer_kind="vdn",
        batch_size=48, buffer_capacity=512, min_buffer=48, train_every=3,
        target_interval=150, d_h=32, n_h=2,
        lr=2e-3, eps_anneal_frac=min(1.0, EPS_ANNEAL_STEPS / max(total_steps, 1)),
        eps_end=0.015,
        seed=seed, deterministic=False,
    )


def smoke_config(seed: int, total_steps: int = SMOKE_STEP_BUDGET) -> T.TrainConfig:
    cfg = _base_train([T.TrainStage(battle_env(3, 3), 1.0)], total_steps, seed)
    cfg.early_stop_win_rate = 0.85
    return cfg


def scratch_6v6_config(seed: int,
                       total_steps: int = CURRICULUM_STEP_BUDGET) -> T.TrainConfig:
    cfg = _base_train([T.TrainStage(battle_env(6, 6), 1.0)], total_steps, seed)
    cfg.early_stop_win_rate = CURRICULUM_WIN_RATE + 0.1
    return cfg


def curriculum_config(seed: int,
                      total_steps: int = CURRICULUM_STEP_BUDGET) -> T.TrainConfig:
    cfg = _base_train([T.TrainStage(battle_env(3, 3), 0.3),
                       T.TrainStage(battle_env(6, 6), 0.7)], total_steps, seed)
    cfg.early_stop_win_rate = CURRICULUM_WIN_RATE + 0.1
    return cfg


def transfer_pretrain_config(seed: int, total_steps: int) -> T.TrainConfig:
    return smoke_config(seed, total_steps=total_steps)


def transfer_finetune_config(seed: int, total_steps: int) -> T.TrainConfig:
    cfg = _base_train([T.TrainStage(battle_env(6, 6), 1.0)], total_steps, seed)
    # the loaded policy is already competent; skip the full exploration ramp
    cfg.eps_start = 0.3
    cfg.eps_anneal_frac = 0.1
    cfg.early_stop_win_rate = CURRICULUM_WIN_RATE + 0.1
    return cfg


def run_one(job: dict) -> dict:
    """Execute one training job dict (see the recipe builders below)."""
    kind = job["kind"]
    out_dir = job["out_dir"]
    seed = job["seed"]
    if kind == "smoke":
        cfg = smoke_config(seed, job.get("total_steps", SMOKE_STEP_BUDGET))
        art = T.train(cfg, out_dir)
        threshold = job.get("threshold", SMOKE_WIN_RATE)
    elif kind == "scratch6":
        cfg = scratch_6v6_config(seed, job.get("total_steps", CURRICULUM_STEP_BUDGET))
        art = T.train(cfg, out_dir)
        threshold = job.get("threshold", CURRICULUM_WIN_RATE)
    elif kind == "curriculum":
        cfg = curriculum_config(seed, job.get("total_steps", CURRICULUM_STEP_BUDGET))
        art = T.train(cfg, out_dir)
        threshold = job.get("threshold", CURRICULUM_WIN_RATE)
    elif kind == "transfer":
        pre_steps = job.get("pretrain_steps", 60_000)
        tune_steps = job.get("total_steps", CURRICULUM_STEP_BUDGET) - pre_steps
        pre_cfg = transfer_pretrain_config(seed, pre_steps)
        pre_art = T.train(pre_cfg, os.path.join(out_dir, "pretrain"))
        tune_cfg = transfer_finetune_config(seed, tune_steps)
        agent_params, _, mixer_params, _ = T.transfer_load(
            pre_art.checkpoint_path, tune_cfg.stages[0].env_cfg)
        art = T.train(tune_cfg, out_dir, initial_params=(agent_params, mixer_params))
        threshold = job.get("threshold", CURRICULUM_WIN_RATE)
    else:
        raise ValueError(f"unknown job kind {kind!r}")

    steps_to = T.steps_to_win_rate(art.metrics_path, threshold)
    if kind == "curriculum":
        # the 3v3 stage must not count as reaching the 6v6 threshold
        boundary = int(0.3 * cfg.total_steps)
        steps_to = _steps_to_after(art.metrics_path, threshold, boundary)
    return {"kind": kind, "seed": seed, "out_dir": out_dir,
            "env_steps": art.env_steps, "episodes": art.episodes,
            "best_win_rate": art.best_win_rate,
            "final_win_rate": art.final_win_rate,
            "threshold": threshold, "steps_to_threshold": steps_to,
            "metrics_path": art.metrics_path}


def _steps_to_after(metrics_path: str, threshold: float, after_step: int,
                    min_episodes: int = 32):
    """Crossing step ignoring rows before the boundary and the window refill."""
    import csv
    past_boundary = 0
    with open(metrics_path) as fh:
        for row in csv.DictReader(fh):
            if int(row["env_step"]) <= after_step:
                continue
            past_boundary += 1
            if past_boundary >= min_episodes and float(row["win_rate"]) >= threshold:
                return int(row["env_step"])
    return None


def run_jobs(jobs: list[dict], workers: int = 2) -> list[dict]:
    if workers <= 1 or len(jobs) == 1:
        return [run_one(job) for job in jobs]
    ctx = get_context("fork")
    with ctx.Pool(min(workers, len(jobs))) as pool:
        return pool.map(run_one, jobs)


def censored(results: list[dict], budget: int) -> list[int]:
    """Steps-to-threshold with never-reached runs censored at the budget."""
    return [r["steps_to_threshold"] if r["steps_to_threshold"] is not None
            else budget for r in results]


def median(xs: list) -> float:
    xs = sorted(xs)
    n = len(xs)
    mid = n // 2
    return float(xs[mid]) if n % 2 else (xs[mid - 1] + xs[mid]) / 2.0


def write_summary(path: str, payload: dict) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
