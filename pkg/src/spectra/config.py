"""Plain-text run configuration: ``[section]`` headers over ``key = value`` lines.

Hand-rolled so configs stay dependency-free and byte-stable. ``--set``
overrides use dotted paths (``train.seed=3``, ``stage.2.fraction=0.7``).
Stage sections inherit the ``[env]`` base keys and override them.
"""
from __future__ import annotations

from dataclasses import fields

from .env import DEFAULT_UNIT_STATS, EnvConfig, UnitStats
from .trainer import TrainConfig, TrainStage


def parse_config_text(text: str) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        if current is None:
            raise ValueError(f"line {lineno}: key outside any [section]")
        key, value = (part.strip() for part in line.split("=", 1))
        sections[current][key] = value
    return sections


def load_config(path) -> dict[str, dict[str, str]]:
    with open(path) as fh:
        return parse_config_text(fh.read())


def apply_overrides(sections: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not section.key=value")
        path, value = item.split("=", 1)
        parts = path.strip().split(".")
        if len(parts) < 2:
            raise ValueError(f"override {item!r} needs a section prefix")
        section = ".".join(parts[:-1])
        sections.setdefault(section, {})[parts[-1]] = value.strip()
    return sections


_ENV_KEYS = {"m": int, "e": int, "arena": float, "sight_range": float,
             "move_step": float, "max_steps": int, "seed": int,
             "enemy_policy": str}
_STAT_KEYS = {"hp": "hp_max", "range": "attack_range", "damage": "damage"}


def build_env_config(section: dict[str, str]) -> EnvConfig:
    kwargs = {}
    stats = {name: dict(hp_max=s.hp_max, attack_range=s.attack_range, damage=s.damage)
             for name, s in DEFAULT_UNIT_STATS.items()}
    for key, value in section.items():
        if key in _ENV_KEYS:
            kwargs[key] = _ENV_KEYS[key](value)
            continue
        head, _, unit = key.partition("_")
        if head in _STAT_KEYS and unit in stats:
            stats[unit][_STAT_KEYS[head]] = float(value)
            continue
        if key == "fraction":
            continue
        raise ValueError(f"unknown env key {key!r}")
    kwargs["unit_stats"] = {name: UnitStats(**vals) for name, vals in stats.items()}
    return EnvConfig(**kwargs)


_TRAIN_KEYS = {
    "total_steps": ("total_steps", int),
    "agent": ("agent_kind", str),
    "mixer": ("mixer_kind", str),
    "gamma": ("gamma", float),
    "lr": ("lr", float),
    "grad_clip": ("grad_clip", float),
    "eps_start": ("eps_start", float),
    "eps_end": ("eps_end", float),
    "eps_anneal_frac": ("eps_anneal_frac", float),
    "batch_size": ("batch_size", int),
    "buffer_capacity": ("buffer_capacity", int),
    "min_buffer": ("min_buffer", int),
    "train_every": ("train_every", int),
    "target_interval": ("target_interval", int),
    "hidden_size": ("d_h", int),
    "n_head": ("n_h", int),
    "mix_embed": ("mix_embed", int),
    "mix_heads": ("mix_heads", int),
    "seed": ("seed", int),
    "deterministic": ("deterministic", lambda v: v.lower() in ("1", "true", "yes")),
    "checkpoint_every": ("checkpoint_every", int),
    "win_window": ("win_window", int),
    "early_stop_win_rate": ("early_stop_win_rate", float),
}


def build_train_config(sections: dict[str, dict[str, str]]) -> TrainConfig:
    train_section = sections.get("train", {})
    kwargs = {}
    for key, value in train_section.items():
        if key not in _TRAIN_KEYS:
            raise ValueError(f"unknown train key {key!r}")
        field_name, conv = _TRAIN_KEYS[key]
        kwargs[field_name] = conv(value)

    base_env = dict(sections.get("env", {}))
    stage_names = sorted((name for name in sections if name.startswith("stage.")),
                         key=lambda s: int(s.split(".", 1)[1]))
    stages = []
    if stage_names:
        for name in stage_names:
            merged = dict(base_env)
            merged.update(sections[name])
            if "fraction" not in merged:
                raise ValueError(f"[{name}] needs a fraction key")
            stages.append(TrainStage(env_cfg=build_env_config(merged),
                                     fraction=float(merged["fraction"])))
    else:
        if not base_env:
            raise ValueError("config needs an [env] section or [stage.N] sections")
        stages.append(TrainStage(env_cfg=build_env_config(base_env), fraction=1.0))

    if "total_steps" not in kwargs:
        raise ValueError("[train] must set total_steps")
    cfg = TrainConfig(stages=stages, **kwargs)
    cfg.validate()
    return cfg


def config_snapshot(sections: dict[str, dict[str, str]]) -> dict:
    """Stable, JSON-ready copy of the resolved config."""
    return {name: dict(sorted(kv.items())) for name, kv in sorted(sections.items())}
