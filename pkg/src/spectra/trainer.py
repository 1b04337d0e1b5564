"""Value-decomposition Q-learning: replay, TD targets, curriculum, transfer.

Episodes are collected with epsilon-greedy rollouts on frozen parameters,
stored as fixed-length padded arrays, and replayed through a batched
forward-in-time pass that recomputes GRU hidden states. The TD target uses
the double-Q convention: argmax from the online network, value from the
target network. Everything is single-threaded and fully deterministic for a
fixed config seed.
"""
from __future__ import annotations

import copy
import csv
import math
import time
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import agent as A
from . import autodiff as ad
from . import checkpoint as ckpt
from . import env as E
from . import mixer as M


# -- episode storage ---------------------------------------------------------

@dataclass
class EpisodeBatch:
    """One padded episode. Index [t] is the pre-action step, [t+1] its successor."""
    own: np.ndarray          # (T_cap+1, m, d_own)
    allies: np.ndarray       # (T_cap+1, m, Sa, d_other)
    ally_ids: np.ndarray
    ally_mask: np.ndarray
    enemies: np.ndarray
    enemy_ids: np.ndarray
    enemy_mask: np.ndarray
    avail: np.ndarray        # (T_cap+1, m, W)
    states: np.ndarray       # (T_cap+1, m, d_s)
    actions: np.ndarray      # (T_cap, m) flat action index
    rewards: np.ndarray      # (T_cap,)
    length: int
    win: bool

    @property
    def episode_return(self) -> float:
        return float(self.rewards[:self.length].sum())


def _alloc_episode(cfg: E.EnvConfig) -> EpisodeBatch:
    cap, m, sa, se = cfg.max_steps, cfg.m, cfg.m - 1, cfg.e
    return EpisodeBatch(
        own=np.zeros((cap + 1, m, E.D_OWN)),
        allies=np.zeros((cap + 1, m, sa, E.D_OTHER)),
        ally_ids=np.full((cap + 1, m, sa), -1, dtype=np.int64),
        ally_mask=np.zeros((cap + 1, m, sa), dtype=bool),
        enemies=np.zeros((cap + 1, m, se, E.D_OTHER)),
        enemy_ids=np.full((cap + 1, m, se), -1, dtype=np.int64),
        enemy_mask=np.zeros((cap + 1, m, se), dtype=bool),
        avail=np.zeros((cap + 1, m, cfg.mask_width), dtype=bool),
        states=np.zeros((cap + 1, m, E.D_STATE)),
        actions=np.zeros((cap, m), dtype=np.int64),
        rewards=np.zeros(cap),
        length=0,
        win=False,
    )


def _store_step(ep: EpisodeBatch, t: int, res: E.StepResult) -> None:
    for i, obs in enumerate(res.observations):
        ep.own[t, i] = obs.own
        for j, ent in enumerate(obs.allies):
            ep.allies[t, i, j] = ent.features
            ep.ally_ids[t, i, j] = ent.entity_id
            ep.ally_mask[t, i, j] = ent.visible
        for j, ent in enumerate(obs.enemies):
            ep.enemies[t, i, j] = ent.features
            ep.enemy_ids[t, i, j] = ent.entity_id
            ep.enemy_mask[t, i, j] = ent.visible
    ep.avail[t] = np.stack(res.avail)
    ep.states[t] = res.state


def _obs_batch(ep_fields, t) -> A.ObsBatch:
    own = ep_fields["own"][:, t]
    b, m = own.shape[:2]
    flat = lambda arr: arr[:, t].reshape((b * m,) + arr.shape[3:])
    return A.ObsBatch(
        own=own.reshape(b * m, -1),
        own_ids=np.repeat(np.arange(m)[None, :], b, axis=0).reshape(-1),
        allies=flat(ep_fields["allies"]),
        ally_ids=flat(ep_fields["ally_ids"]),
        ally_mask=flat(ep_fields["ally_mask"]),
        enemies=flat(ep_fields["enemies"]),
        enemy_ids=flat(ep_fields["enemy_ids"]),
        enemy_mask=flat(ep_fields["enemy_mask"]),
    )


def _flat_epsilon_greedy(qrow: np.ndarray, mask: np.ndarray, eps: float,
                         rng: np.random.Generator) -> int:
    if eps > 0.0 and rng.random() < eps:
        legal = np.nonzero(mask)[0]
        return int(legal[rng.integers(legal.size)])
    return int(np.argmax(qrow))


def decode_action(idx: int, slot_ids: np.ndarray) -> A.ActionChoice:
    if idx < E.N_OWN_ACTIONS:
        return A.ActionChoice(kind="own", index=idx)
    return A.ActionChoice(kind="target", target_id=int(slot_ids[idx - E.N_OWN_ACTIONS]))


def rollout(env: E.MicroBattleEnv, params: A.AgentNetParams, eps: float,
            rng: np.random.Generator, episode_seed: int = 0) -> EpisodeBatch:
    """Collect one full episode; GRU state resets here, params stay frozen."""
    res = env.reset(episode_seed)
    ep = _alloc_episode(env.cfg)
    m = env.cfg.m
    h = A.zero_hidden(params, m)
    with ad.no_grad():
        fused = A.fuse_params(params)
    t = 0
    while not res.terminated:
        _store_step(ep, t, res)
        batch = A.stack_observations(res.observations)
        avail = np.stack(res.avail)
        with ad.no_grad():
            q, h, ids = A.forward_batch(params, batch, h, avail, fused=fused)
        choices = []
        for i in range(m):
            idx = _flat_epsilon_greedy(q.value[i], avail[i], eps, rng)
            ep.actions[t, i] = idx
            choices.append(decode_action(idx, ids[i]))
        res = env.step(choices)
        ep.rewards[t] = res.reward
        t += 1
    _store_step(ep, t, res)
    ep.length = t
    ep.win = res.win
    # pad with the terminal step so stacked batches stay rectangular
    for pt in range(t + 1, env.cfg.max_steps + 1):
        ep.own[pt] = ep.own[t]
        ep.allies[pt] = ep.allies[t]
        ep.ally_ids[pt] = ep.ally_ids[t]
        ep.ally_mask[pt] = ep.ally_mask[t]
        ep.enemies[pt] = ep.enemies[t]
        ep.enemy_ids[pt] = ep.enemy_ids[t]
        ep.enemy_mask[pt] = ep.enemy_mask[t]
        ep.avail[pt] = ep.avail[t]
        ep.states[pt] = ep.states[t]
    return ep


class ReplayBuffer:
    """FIFO episode store with uniform sampling."""

    def __init__(self, capacity: int):
        self.episodes: deque[EpisodeBatch] = deque(maxlen=capacity)

    def add(self, ep: EpisodeBatch) -> None:
        self.episodes.append(ep)

    def __len__(self) -> int:
        return len(self.episodes)

    def clear(self) -> None:
        self.episodes.clear()

    def sample(self, k: int, rng: np.random.Generator) -> list[EpisodeBatch]:
        if k > len(self.episodes):
            raise ValueError("not enough episodes buffered")
        idx = rng.choice(len(self.episodes), size=k, replace=False)
        return [self.episodes[int(i)] for i in idx]


# -- loss ---------------------------------------------------------------------

def _stack_fields(episodes: list[EpisodeBatch]) -> dict:
    names = ("own", "allies", "ally_ids", "ally_mask", "enemies", "enemy_ids",
             "enemy_mask", "avail", "states", "actions", "rewards")
    fields = {n: np.stack([getattr(ep, n) for ep in episodes]) for n in names}
    fields["length"] = np.array([ep.length for ep in episodes])
    return fields


def _sequence_q(params: A.AgentNetParams, fields: dict, t_max: int) -> list:
    b, _, m = fields["own"].shape[:3]
    w = fields["avail"].shape[-1]
    h = A.zero_hidden(params, b * m)
    fused = A.fuse_params(params)
    qs = []
    for t in range(t_max + 1):
        batch = _obs_batch(fields, t)
        avail = fields["avail"][:, t].reshape(b * m, w)
        q, h, _ = A.forward_batch(params, batch, h, avail, fused=fused)
        qs.append(q)
    return qs


def td_loss(episodes: list[EpisodeBatch], agent_params: A.AgentNetParams,
            mixer_kind: str, mixer_params, target_agent: A.AgentNetParams,
            target_mixer, gamma: float):
    """Mean squared TD error over unpadded steps; returns (loss, info)."""
    if not episodes:
        raise ValueError("empty batch")
    fields = _stack_fields(episodes)
    b = len(episodes)
    m = fields["own"].shape[2]
    t_max = int(fields["length"].max())
    lengths = fields["length"]

    online_qs = _sequence_q(agent_params, fields, t_max)
    with ad.no_grad():
        target_qs = _sequence_q(target_agent, fields, t_max)

    # TD targets: online argmax, target value, target mixer
    y = np.zeros((b, t_max))
    rows = np.arange(b * m)
    for t in range(1, t_max + 1):
        amax = online_qs[t].value.argmax(axis=-1)
        tv = target_qs[t].value[rows, amax].reshape(b, m)
        with ad.no_grad():
            joint = M.mix_batch(mixer_kind, target_mixer, ad.tensor(tv),
                                ad.tensor(fields["states"][:, t]))
        done = (lengths == t).astype(np.float64)
        y[:, t - 1] = fields["rewards"][:, t - 1] + gamma * (1.0 - done) * joint.value

    pad = (np.arange(t_max)[None, :] < lengths[:, None]).astype(np.float64)
    n_steps = pad.sum()
    acc = None
    td_errors = np.zeros((b, t_max))
    for t in range(t_max):
        q_chosen = ad.gather(online_qs[t], fields["actions"][:, t].reshape(-1))
        q_per_agent = ad.reshape(q_chosen, (b, m))
        joint = M.mix_batch(mixer_kind, mixer_params, q_per_agent,
                            ad.tensor(fields["states"][:, t]))
        diff = ad.sub(joint, ad.tensor(y[:, t]))
        td_errors[:, t] = diff.value * pad[:, t]
        term = ad.sum_all(ad.mul(ad.mul(diff, diff), ad.tensor(pad[:, t])))
        acc = term if acc is None else ad.add(acc, term)
    loss = ad.scale(acc, 1.0 / n_steps)
    return loss, {"n_steps": n_steps, "td_errors": td_errors, "pad": pad}


# -- optimization --------------------------------------------------------------

class Adam:
    """Adaptive moment estimation with global gradient-norm clipping."""

    def __init__(self, named_params, lr: float = 5e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, clip_norm: float = 10.0):
        self.params = list(named_params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {n: np.zeros_like(p.value) for n, p in self.params}
        self.v = {n: np.zeros_like(p.value) for n, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> float:
        grads = {n: p.grad for n, p in self.params if p.grad is not None}
        total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        scale = self.clip_norm / total if total > self.clip_norm else 1.0
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for n, p in self.params:
            g = p.grad
            if g is None:
                continue
            g = g * scale
            self.m[n] = self.b1 * self.m[n] + (1.0 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1.0 - self.b2) * g * g
            p.value -= self.lr * (self.m[n] / bc1) / (np.sqrt(self.v[n] / bc2) + self.eps)
        return total


def sync_params(src, dst) -> None:
    for (ns, ps), (nd, pd) in zip(src.named_parameters(), dst.named_parameters()):
        assert ns == nd
        pd.value[...] = ps.value


# -- training loop --------------------------------------------------------------

@dataclass(frozen=True)
class TrainStage:
    env_cfg: E.EnvConfig
    fraction: float


@dataclass
class TrainConfig:
    stages: list[TrainStage]
    total_steps: int
    agent_kind: str = "spectra"
    mixer_kind: str = "vdn"
    gamma: float = 0.99
    lr: float = 5e-4
    grad_clip: float = 10.0
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_anneal_frac: float = 0.2
    batch_size: int = 128
    buffer_capacity: int = 2000
    min_buffer: int = 32
    train_every: int = 1
    target_interval: int = 200
    d_h: int = 64
    n_h: int = 4
    mix_embed: int = 32
    mix_heads: int = 4
    seed: int = 0
    deterministic: bool = True
    checkpoint_every: int = 0
    win_window: int = 32
    early_stop_win_rate: float | None = None

    def validate(self) -> None:
        if not self.stages:
            raise ValueError("need at least one stage")
        if abs(sum(s.fraction for s in self.stages) - 1.0) > 1e-9:
            raise ValueError("stage fractions must sum to 1")
        if self.batch_size > self.buffer_capacity:
            raise ValueError("batch_size exceeds buffer capacity")
        if self.mixer_kind == "qmix":
            sizes = {s.env_cfg.m for s in self.stages}
            if len(sizes) > 1:
                raise ValueError("non-scalable mixer: qmix cannot change team size")


METRICS_HEADER = ("env_step", "episode_return", "win_rate", "loss", "epsilon",
                  "wall_clock_s")


@dataclass
class RunArtifacts:
    metrics_path: str
    checkpoint_path: str
    param_hash: str
    env_steps: int
    episodes: int
    final_win_rate: float
    best_win_rate: float
    win_history: list[bool] = field(default_factory=list)
    step_history: list[int] = field(default_factory=list)


def build_networks(cfg: TrainConfig):
    param_rng = np.random.default_rng([cfg.seed, 0])
    agent_params = A.AgentNetParams.create(
        param_rng, cfg.agent_kind, E.D_OWN, E.D_OTHER, E.D_OTHER,
        d_h=cfg.d_h, n_h=cfg.n_h, n_own_actions=E.N_OWN_ACTIONS)
    mixer_params = M.create_mixer(cfg.mixer_kind, param_rng, E.D_STATE,
                                  m=cfg.stages[0].env_cfg.m,
                                  d_mix=cfg.mix_embed, n_h=cfg.mix_heads)
    return agent_params, mixer_params


def all_named_parameters(agent_params, mixer_kind, mixer_params):
    yield from agent_params.named_parameters()
    yield from M.mixer_named_parameters(mixer_kind, mixer_params)


def checkpoint_meta(cfg: TrainConfig, env_steps: int) -> dict:
    return {
        "agent_kind": cfg.agent_kind, "mixer_kind": cfg.mixer_kind,
        "d_h": cfg.d_h, "n_h": cfg.n_h,
        "mix_embed": cfg.mix_embed, "mix_heads": cfg.mix_heads,
        "qmix_m": cfg.stages[0].env_cfg.m if cfg.mixer_kind == "qmix" else None,
        "env_steps": env_steps,
    }


def train(cfg: TrainConfig, out_dir, initial_params=None) -> RunArtifacts:
    """Run the rollout/replay/update loop, writing metrics and checkpoints.

    ``initial_params`` optionally carries (agent_params, mixer_params) from a
    checkpoint reload for transfer fine-tuning.
    """
    import os
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)

    if initial_params is not None:
        agent_params, mixer_params = initial_params
    else:
        agent_params, mixer_params = build_networks(cfg)
    target_agent = copy.deepcopy(agent_params)
    target_mixer = copy.deepcopy(mixer_params)

    opt = Adam(all_named_parameters(agent_params, cfg.mixer_kind, mixer_params),
               lr=cfg.lr, clip_norm=cfg.grad_clip)
    action_rng = np.random.default_rng([cfg.seed, 1])
    sample_rng = np.random.default_rng([cfg.seed, 2])
    buffer = ReplayBuffer(cfg.buffer_capacity)

    boundaries = np.cumsum([s.fraction for s in cfg.stages]) * cfg.total_steps
    stage_idx = 0
    env = E.MicroBattleEnv(cfg.stages[0].env_cfg)

    metrics_path = os.path.join(out_dir, "metrics.csv")
    ckpt_path = os.path.join(out_dir, "checkpoint_final.spck")
    wins: deque[bool] = deque(maxlen=cfg.win_window)
    win_history: list[bool] = []
    step_history: list[int] = []
    env_steps = 0
    episode = 0
    last_loss = float("nan")
    best_win_rate = 0.0
    t0 = time.monotonic()

    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)

        while env_steps < cfg.total_steps:
            if stage_idx + 1 < len(cfg.stages) and env_steps >= boundaries[stage_idx]:
                stage_idx += 1
                env = E.MicroBattleEnv(cfg.stages[stage_idx].env_cfg)
                buffer.clear()
                wins.clear()    # win rate should reflect the current stage only

            eps = _epsilon(cfg, env_steps)
            ep = rollout(env, agent_params, eps, action_rng, episode_seed=episode)
            buffer.add(ep)
            env_steps += ep.length
            episode += 1
            wins.append(ep.win)
            win_history.append(ep.win)
            step_history.append(env_steps)
            win_rate = sum(wins) / len(wins)
            best_win_rate = max(best_win_rate, win_rate) if len(wins) == cfg.win_window \
                else best_win_rate

            if len(buffer) >= max(cfg.min_buffer, cfg.batch_size) \
                    and episode % cfg.train_every == 0:
                batch = buffer.sample(cfg.batch_size, sample_rng)
                opt.zero_grad()
                loss, _ = td_loss(batch, agent_params, cfg.mixer_kind, mixer_params,
                                  target_agent, target_mixer, cfg.gamma)
                if not np.isfinite(loss.value):
                    _dump_diagnostics(out_dir, cfg, agent_params, mixer_params,
                                      env_steps, episode)
                    raise RuntimeError(
                        f"non-finite loss ({float(loss.value)}) at episode {episode}")
                loss.backward()
                opt.step()
                last_loss = float(loss.value)

            if episode % cfg.target_interval == 0:
                sync_params(agent_params, target_agent)
                if mixer_params is not None:
                    sync_params(mixer_params, target_mixer)

            wall = 0.0 if cfg.deterministic else time.monotonic() - t0
            writer.writerow([env_steps, f"{ep.episode_return:.6f}", f"{win_rate:.6f}",
                             f"{last_loss:.6f}", f"{eps:.6f}", f"{wall:.6f}"])

            if cfg.checkpoint_every and episode % cfg.checkpoint_every == 0:
                ckpt.save_manifest(
                    os.path.join(out_dir, f"checkpoint_ep{episode}.spck"),
                    all_named_parameters(agent_params, cfg.mixer_kind, mixer_params),
                    meta=checkpoint_meta(cfg, env_steps))

            if cfg.early_stop_win_rate is not None and len(wins) == cfg.win_window \
                    and win_rate >= cfg.early_stop_win_rate:
                break

    param_hash = ckpt.save_manifest(
        ckpt_path, all_named_parameters(agent_params, cfg.mixer_kind, mixer_params),
        meta=checkpoint_meta(cfg, env_steps))

    return RunArtifacts(
        metrics_path=metrics_path, checkpoint_path=ckpt_path, param_hash=param_hash,
        env_steps=env_steps, episodes=episode,
        final_win_rate=sum(wins) / len(wins) if wins else 0.0,
        best_win_rate=best_win_rate,
        win_history=win_history, step_history=step_history)


def _epsilon(cfg: TrainConfig, env_steps: int) -> float:
    anneal = max(1, int(cfg.total_steps * cfg.eps_anneal_frac))
    frac = min(1.0, env_steps / anneal)
    return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)


def _dump_diagnostics(out_dir, cfg, agent_params, mixer_params, env_steps, episode):
    import os
    path = os.path.join(out_dir, "nan_diagnostics.spck")
    ckpt.save_manifest(path, all_named_parameters(agent_params, cfg.mixer_kind,
                                                  mixer_params),
                       meta={"env_steps": env_steps, "episode": episode,
                             "reason": "nan_loss"})


def transfer_load(checkpoint_path, new_env_cfg: E.EnvConfig):
    """Rebuild networks from a manifest and restore every array bit-exactly."""
    header, arrays = ckpt.load_manifest(checkpoint_path)
    meta = header["meta"]
    rng = np.random.default_rng(0)
    agent_params = A.AgentNetParams.create(
        rng, meta["agent_kind"], E.D_OWN, E.D_OTHER, E.D_OTHER,
        d_h=meta["d_h"], n_h=meta["n_h"], n_own_actions=E.N_OWN_ACTIONS)
    mixer_kind = meta["mixer_kind"]
    if mixer_kind == "qmix" and meta["qmix_m"] != new_env_cfg.m:
        raise ValueError("non-scalable mixer: checkpoint was built for "
                         f"m={meta['qmix_m']}, env has m={new_env_cfg.m}")
    mixer_params = M.create_mixer(mixer_kind, rng, E.D_STATE,
                                  m=new_env_cfg.m, d_mix=meta["mix_embed"],
                                  n_h=meta["mix_heads"])
    ckpt.restore(all_named_parameters(agent_params, mixer_kind, mixer_params), arrays)
    return agent_params, mixer_kind, mixer_params, meta


def evaluate(env_cfg: E.EnvConfig, agent_params: A.AgentNetParams, episodes: int,
             seed0: int = 10_000) -> dict:
    """Greedy evaluation: win rate and mean return over fresh episodes."""
    env = E.MicroBattleEnv(env_cfg)
    rng = np.random.default_rng(0)       # eps=0: rng never consulted
    wins = 0
    returns = []
    for k in range(episodes):
        ep = rollout(env, agent_params, eps=0.0, rng=rng, episode_seed=seed0 + k)
        wins += bool(ep.win)
        returns.append(ep.episode_return)
    return {"win_rate": wins / episodes, "mean_return": float(np.mean(returns)),
            "episodes": episodes}


def steps_to_win_rate(metrics_path, threshold: float,
                      min_episodes: int = 32) -> int | None:
    """First env_step at which the rolling win rate reached the threshold.

    Rows before ``min_episodes`` are skipped: the window is still filling up
    there and a lucky first episode would count as a crossing.
    """
    with open(metrics_path) as fh:
        reader = csv.DictReader(fh)
        for i, row in enumerate(reader):
            if i + 1 >= min_episodes and float(row["win_rate"]) >= threshold:
                return int(row["env_step"])
    return None
