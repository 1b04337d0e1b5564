"""Deterministic, seedable m-vs-e micro-battle environment.

Two teams of skirmishers/bruisers on a square arena. Allies are controlled
externally through discrete own actions (noop, four compass moves) plus
attack-by-entity-id targeted actions; enemies follow a scripted focus-nearest
policy. Both sides resolve simultaneously: moves first (computed from the
pre-step positions), then attacks. Rewards are team-shared and normalized by
the total starting HP, with a flat bonus for wiping the enemy team.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .agent import ActionChoice, EntityObs, ObservationSet

N_OWN_ACTIONS = 5       # noop, N, S, E, W
NOOP = ActionChoice(kind="own", index=0)
WIN_BONUS = 10.0

_MOVES = {1: (0.0, 1.0), 2: (0.0, -1.0), 3: (1.0, 0.0), 4: (-1.0, 0.0)}

D_OWN = 5               # x, y, hp, type one-hot
D_OTHER = 6             # dx, dy, dist, hp, type one-hot
D_STATE = 2 * D_OWN     # own absolute features ++ pooled living-enemy features


@dataclass(frozen=True)
class UnitStats:
    hp_max: float
    attack_range: float
    damage: float


DEFAULT_UNIT_STATS = {
    "skirmisher": UnitStats(hp_max=75.0, attack_range=5.0, damage=8.0),
    "bruiser": UnitStats(hp_max=120.0, attack_range=2.5, damage=14.0),
}
UNIT_TYPES = tuple(DEFAULT_UNIT_STATS)


@dataclass(frozen=True)
class EnvConfig:
    m: int
    e: int
    arena: float = 16.0
    sight_range: float = 9.0
    move_step: float = 1.0
    max_steps: int = 64
    seed: int = 0
    enemy_policy: str = "focus-nearest"
    unit_stats: dict = field(default_factory=lambda: dict(DEFAULT_UNIT_STATS))

    def __post_init__(self):
        if self.m < 1 or self.e < 1:
            raise ValueError("both teams need at least one unit")
        if self.enemy_policy != "focus-nearest":
            raise ValueError(f"unknown enemy policy {self.enemy_policy!r}")
        for name, stats in self.unit_stats.items():
            if self.sight_range < stats.attack_range:
                raise ValueError(f"sight range must cover {name} attack range")

    @property
    def n_slots(self) -> int:
        return 1 + (self.m - 1) + self.e

    @property
    def mask_width(self) -> int:
        return N_OWN_ACTIONS + self.n_slots


@dataclass
class Entity:
    id: int
    team: str               # "ally" | "enemy"
    pos: np.ndarray
    hp: float
    unit_type: str

    @property
    def alive(self) -> bool:
        return self.hp > 0.0


@dataclass
class StepResult:
    observations: list[ObservationSet]
    state: np.ndarray
    avail: list[np.ndarray]
    reward: float
    terminated: bool
    win: bool
    t: int


class MicroBattleEnv:
    """One instance per thread; all randomness comes from (cfg.seed, episode_seed)."""

    def __init__(self, cfg: EnvConfig, trace: bool = False):
        self.cfg = cfg
        self.entities: list[Entity] = []
        self.t = 0
        self.terminated = True
        self.hp_total = 0.0
        self._avail: list[np.ndarray] = []
        self.trace_enabled = trace
        self.trace: list[dict] = []

    # -- lifecycle ---------------------------------------------------------

    def reset(self, episode_seed: int = 0) -> StepResult:
        rng = np.random.default_rng([self.cfg.seed, episode_seed])
        L = self.cfg.arena
        self.entities = []
        for i in range(self.cfg.m):
            self.entities.append(self._spawn(rng, i, "ally", x_lo=0.0, x_hi=L / 2.0))
        for j in range(self.cfg.e):
            self.entities.append(self._spawn(rng, self.cfg.m + j, "enemy",
                                             x_lo=L / 2.0, x_hi=L))
        self.hp_total = sum(ent.hp for ent in self.entities)
        self.t = 0
        self.terminated = False
        self.trace = []
        return self._result(reward=0.0, win=False)

    def _spawn(self, rng, eid, team, x_lo, x_hi) -> Entity:
        unit_type = UNIT_TYPES[rng.integers(0, len(UNIT_TYPES))]
        x = rng.uniform(x_lo, x_hi)
        y = rng.uniform(0.0, self.cfg.arena)
        return Entity(id=eid, team=team, pos=np.array([x, y]),
                      hp=self.cfg.unit_stats[unit_type].hp_max, unit_type=unit_type)

    # -- views -------------------------------------------------------------

    @property
    def allies(self) -> list[Entity]:
        return self.entities[:self.cfg.m]

    @property
    def enemies(self) -> list[Entity]:
        return self.entities[self.cfg.m:]

    def _stats(self, ent: Entity) -> UnitStats:
        return self.cfg.unit_stats[ent.unit_type]

    def _visible(self, observer: Entity, other: Entity) -> bool:
        if observer.id == other.id:
            return True
        if not other.alive:
            return False
        return float(np.linalg.norm(other.pos - observer.pos)) <= self.cfg.sight_range

    # -- dynamics ----------------------------------------------------------

    def step(self, actions: list[ActionChoice]) -> StepResult:
        if self.terminated:
            raise RuntimeError("episode is over; call reset")
        if len(actions) != self.cfg.m:
            raise ValueError(f"need one action per ally, got {len(actions)}")
        for i, act in enumerate(actions):
            if not self._is_legal(i, act):
                raise ValueError(f"illegal action {act} for agent {i}")

        by_id = {ent.id: ent for ent in self.entities}
        attacks: list[tuple[Entity, Entity]] = []
        moves: list[tuple[Entity, np.ndarray]] = []

        for ally, act in zip(self.allies, actions):
            if act.kind == "own":
                if act.index in _MOVES:
                    dx, dy = _MOVES[act.index]
                    moves.append((ally, ally.pos + self.cfg.move_step * np.array([dx, dy])))
            else:
                attacks.append((ally, by_id[act.target_id]))

        for enemy in self.enemies:
            plan = self._scripted_action(enemy)
            if plan is None:
                continue
            kind, payload = plan
            if kind == "attack":
                attacks.append((enemy, payload))
            else:
                moves.append((enemy, payload))

        for ent, target_pos in moves:
            ent.pos = np.clip(target_pos, 0.0, self.cfg.arena)

        incoming: dict[int, float] = {}
        for attacker, target in attacks:
            incoming[target.id] = incoming.get(target.id, 0.0) + self._stats(attacker).damage

        dealt = received = 0.0
        for tid, dmg in incoming.items():
            target = by_id[tid]
            loss = min(target.hp, dmg)
            target.hp -= loss
            if target.team == "enemy":
                dealt += loss
            else:
                received += loss

        self.t += 1
        win = not any(ent.alive for ent in self.enemies)
        wiped = not any(ent.alive for ent in self.allies)
        self.terminated = win or wiped or self.t >= self.cfg.max_steps
        reward = (dealt - received) / self.hp_total + (WIN_BONUS if win else 0.0)

        result = self._result(reward=reward, win=win)
        if self.trace_enabled:
            self.trace.append({
                "t": self.t, "dealt": dealt, "received": received,
                "reward": reward, "terminated": self.terminated, "win": win,
                "entities": [{"id": ent.id, "team": ent.team, "type": ent.unit_type,
                              "x": float(ent.pos[0]), "y": float(ent.pos[1]),
                              "hp": ent.hp} for ent in self.entities],
            })
        return result

    def _scripted_action(self, enemy: Entity):
        if not enemy.alive:
            return None
        living = [a for a in self.allies if a.alive]
        if not living:
            return None
        dists = [float(np.linalg.norm(a.pos - enemy.pos)) for a in living]
        nearest = living[int(np.argmin(dists))]     # argmin keeps the lowest id on ties
        dist = min(dists)
        if dist <= self._stats(enemy).attack_range:
            return ("attack", nearest)
        if dist == 0.0:
            return None
        direction = (nearest.pos - enemy.pos) / dist
        return ("move", enemy.pos + direction * min(self.cfg.move_step, dist))

    def _is_legal(self, agent_idx: int, act: ActionChoice) -> bool:
        mask = self._avail[agent_idx]
        if act.kind == "own":
            return act.index is not None and 0 <= act.index < N_OWN_ACTIONS and mask[act.index]
        slot_ids = self._slot_ids(agent_idx)
        hits = np.nonzero(slot_ids == act.target_id)[0]
        return hits.size == 1 and bool(mask[N_OWN_ACTIONS + hits[0]])

    # -- observation / state builders ---------------------------------------

    def _slot_ids(self, agent_idx: int) -> np.ndarray:
        me = self.allies[agent_idx]
        ids = [me.id] + [a.id for a in self.allies if a.id != me.id] \
              + [en.id for en in self.enemies]
        return np.array(ids, dtype=np.int64)

    def _own_features(self, ent: Entity) -> np.ndarray:
        L = self.cfg.arena
        one_hot = [1.0 if ent.unit_type == t else 0.0 for t in UNIT_TYPES]
        return np.array([ent.pos[0] / L, ent.pos[1] / L,
                         ent.hp / self._stats(ent).hp_max, *one_hot])

    def _other_features(self, observer: Entity, other: Entity) -> np.ndarray:
        L = self.cfg.arena
        delta = other.pos - observer.pos
        one_hot = [1.0 if other.unit_type == t else 0.0 for t in UNIT_TYPES]
        return np.array([delta[0] / L, delta[1] / L, float(np.linalg.norm(delta)) / L,
                         other.hp / self._stats(other).hp_max, *one_hot])

    def _build_observation(self, agent_idx: int) -> ObservationSet:
        me = self.allies[agent_idx]
        allies = []
        for other in self.allies:
            if other.id == me.id:
                continue
            vis = me.alive and self._visible(me, other)
            feats = self._other_features(me, other) if vis else np.zeros(D_OTHER)
            allies.append(EntityObs(entity_id=other.id, features=feats, visible=vis))
        enemies = []
        for other in self.enemies:
            vis = me.alive and self._visible(me, other)
            feats = self._other_features(me, other) if vis else np.zeros(D_OTHER)
            enemies.append(EntityObs(entity_id=other.id, features=feats, visible=vis))
        return ObservationSet(own_id=me.id, own=self._own_features(me),
                              allies=tuple(allies), enemies=tuple(enemies))

    def observation_of(self, agent_id: int) -> ObservationSet:
        if not 0 <= agent_id < self.cfg.m:
            raise ValueError(f"no ally with id {agent_id}")
        if not self.allies[agent_id].alive:
            raise ValueError(f"agent {agent_id} is dead")
        return self._build_observation(agent_id)

    def global_state(self) -> np.ndarray:
        living = [en for en in self.enemies if en.alive]
        if living:
            pooled = np.mean([self._own_features(en) for en in living], axis=0)
        else:
            pooled = np.zeros(D_OWN)
        rows = [np.concatenate([self._own_features(a), pooled]) for a in self.allies]
        return np.stack(rows)

    def _action_mask(self, agent_idx: int) -> np.ndarray:
        me = self.allies[agent_idx]
        mask = np.zeros(self.cfg.mask_width, dtype=bool)
        mask[0] = True                                  # noop is always legal
        if not me.alive:
            return mask
        mask[1:N_OWN_ACTIONS] = True
        rng_ = self._stats(me).attack_range
        offset = N_OWN_ACTIONS + 1 + (self.cfg.m - 1)
        for j, enemy in enumerate(self.enemies):
            if enemy.alive and float(np.linalg.norm(enemy.pos - me.pos)) <= rng_:
                mask[offset + j] = True
        return mask

    def _result(self, reward: float, win: bool) -> StepResult:
        self._avail = [self._action_mask(i) for i in range(self.cfg.m)]
        return StepResult(
            observations=[self._build_observation(i) for i in range(self.cfg.m)],
            state=self.global_state(),
            avail=[mask.copy() for mask in self._avail],
            reward=reward,
            terminated=self.terminated,
            win=win,
            t=self.t,
        )

    def export_trace(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.trace:
                fh.write(json.dumps(row) + "\n")


def infinite_sight(cfg: EnvConfig) -> EnvConfig:
    """Full-observability variant of a config (sight radius override)."""
    return replace(cfg, sight_range=float("inf"))
