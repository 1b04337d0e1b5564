"""Agent Q-networks: attention context, GRU memory, and decoupled action heads.

Three context variants share the GRU and the action heads:

* ``spectra``  - single-query attention over visible entities
* ``sa``       - dense self-attention, mean-pooled over visible entities
* ``meanpool`` - plain mean of entity embeddings, no attention

Own-action values come from the recurrent state through one linear map;
targeted-action values are scaled inner products between per-head queries
(from the recurrent state) and per-entity key embeddings, so they are keyed
by entity identity rather than input position.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import layers as L
from .autodiff import Tensor

AGENT_KINDS = ("spectra", "sa", "meanpool")


@dataclass(frozen=True)
class EntityObs:
    entity_id: int
    features: np.ndarray
    visible: bool


@dataclass(frozen=True)
class ObservationSet:
    """One agent's entity-wise observation, partitioned by class."""
    own_id: int
    own: np.ndarray
    allies: tuple[EntityObs, ...]
    enemies: tuple[EntityObs, ...]

    def __post_init__(self):
        for ent in (*self.allies, *self.enemies):
            if not ent.visible and np.any(ent.features):
                raise ValueError("invisible entities must carry zero feature vectors")


@dataclass(frozen=True)
class ActionChoice:
    kind: str                   # "own" or "target"
    index: int | None = None    # own-action index
    target_id: int | None = None

    def key(self) -> tuple:
        return (0, self.index) if self.kind == "own" else (1, self.target_id)


@dataclass
class ActionValueVector:
    """Masked action values: own actions plus one slot per observed entity."""
    own_values: np.ndarray      # (n_own,), -inf where masked
    target_ids: np.ndarray      # (S,) entity ids in input slot order
    target_values: np.ndarray   # (S,), -inf where masked
    mask: np.ndarray            # (n_own + S,) bool

    def target_value(self, entity_id: int) -> float:
        idx = np.nonzero(self.target_ids == entity_id)[0]
        if idx.size != 1:
            raise KeyError(f"entity {entity_id} not present exactly once")
        return float(self.target_values[idx[0]])


@dataclass
class AgentNetParams:
    kind: str
    cfg: L.AttentionConfig
    n_own_actions: int
    embed_own: L.LinearParams
    embed_ally: L.LinearParams
    embed_enemy: L.LinearParams
    attn: L.AttentionParams | None
    gru: L.GruParams
    w_own_q: Tensor
    w_act_q: list[Tensor]
    w_act_k: list[Tensor]

    @classmethod
    def create(cls, rng: np.random.Generator, kind: str, d_own: int, d_ally: int,
               d_enemy: int, d_h: int, n_h: int, n_own_actions: int,
               dtype=np.float64) -> "AgentNetParams":
        if kind not in AGENT_KINDS:
            raise ValueError(f"unknown agent kind {kind!r}")
        cfg = L.AttentionConfig(d_h=d_h, n_h=n_h)
        attn = L.AttentionParams.create(rng, cfg, dtype) if kind in ("spectra", "sa") else None
        mk_head = lambda: ad.parameter(L.uniform_init(rng, d_h, cfg.d_k, dtype))
        return cls(
            kind=kind, cfg=cfg, n_own_actions=n_own_actions,
            embed_own=L.LinearParams.create(rng, d_own, d_h, bias=False, dtype=dtype),
            embed_ally=L.LinearParams.create(rng, d_ally, d_h, bias=False, dtype=dtype),
            embed_enemy=L.LinearParams.create(rng, d_enemy, d_h, bias=False, dtype=dtype),
            attn=attn,
            gru=L.GruParams.create(rng, d_h, d_h, dtype),
            w_own_q=ad.parameter(L.uniform_init(rng, d_h, n_own_actions, dtype)),
            w_act_q=[mk_head() for _ in range(n_h)],
            w_act_k=[mk_head() for _ in range(n_h)],
        )

    @property
    def d_h(self) -> int:
        return self.cfg.d_h

    def named_parameters(self):
        yield from self.embed_own.named_parameters("agent/embed_own")
        yield from self.embed_ally.named_parameters("agent/embed_ally")
        yield from self.embed_enemy.named_parameters("agent/embed_enemy")
        if self.attn is not None:
            yield from self.attn.named_parameters("agent/attn")
        yield from self.gru.named_parameters("agent/gru")
        yield "agent/w_own_q", self.w_own_q
        for k, t in enumerate(self.w_act_q):
            yield f"agent/act_head{k}/wq", t
        for k, t in enumerate(self.w_act_k):
            yield f"agent/act_head{k}/wk", t

    def parameter_count(self) -> int:
        return sum(t.value.size for _, t in self.named_parameters())


@dataclass
class ObsBatch:
    """Stacked observations for a batch of observers with fixed slot counts."""
    own: np.ndarray          # (B, d_own)
    own_ids: np.ndarray      # (B,)
    allies: np.ndarray       # (B, Sa, d_ally)
    ally_ids: np.ndarray     # (B, Sa)
    ally_mask: np.ndarray    # (B, Sa) bool
    enemies: np.ndarray      # (B, Se, d_enemy)
    enemy_ids: np.ndarray    # (B, Se)
    enemy_mask: np.ndarray   # (B, Se) bool

    @property
    def batch(self) -> int:
        return self.own.shape[0]

    @property
    def n_slots(self) -> int:
        return 1 + self.allies.shape[1] + self.enemies.shape[1]


def stack_observations(obs_list: list[ObservationSet]) -> ObsBatch:
    """Stack same-shape observation sets into contiguous arrays."""
    first = obs_list[0]
    sa, se = len(first.allies), len(first.enemies)
    b = len(obs_list)
    d_own = first.own.shape[0]
    d_ally = first.allies[0].features.shape[0] if sa else 0
    d_enemy = first.enemies[0].features.shape[0] if se else 0
    own = np.zeros((b, d_own))
    own_ids = np.zeros(b, dtype=np.int64)
    allies = np.zeros((b, sa, d_ally))
    ally_ids = np.full((b, sa), -1, dtype=np.int64)
    ally_mask = np.zeros((b, sa), dtype=bool)
    enemies = np.zeros((b, se, d_enemy))
    enemy_ids = np.full((b, se), -1, dtype=np.int64)
    enemy_mask = np.zeros((b, se), dtype=bool)
    for i, obs in enumerate(obs_list):
        if len(obs.allies) != sa or len(obs.enemies) != se:
            raise ValueError("observation sets in a batch must share slot counts")
        own[i] = obs.own
        own_ids[i] = obs.own_id
        for j, ent in enumerate(obs.allies):
            allies[i, j] = ent.features
            ally_ids[i, j] = ent.entity_id
            ally_mask[i, j] = ent.visible
        for j, ent in enumerate(obs.enemies):
            enemies[i, j] = ent.features
            enemy_ids[i, j] = ent.entity_id
            enemy_mask[i, j] = ent.visible
    return ObsBatch(own, own_ids, allies, ally_ids, ally_mask,
                    enemies, enemy_ids, enemy_mask)


def _embed_batch(params: AgentNetParams, batch: ObsBatch) -> L.EmbeddingSet:
    groups, embeds, gids, gmasks = [], [], [], []
    if batch.allies.shape[1]:
        groups.append(ad.tensor(batch.allies))
        embeds.append(params.embed_ally)
        gids.append(batch.ally_ids)
        gmasks.append(batch.ally_mask)
    if batch.enemies.shape[1]:
        groups.append(ad.tensor(batch.enemies))
        embeds.append(params.embed_enemy)
        gids.append(batch.enemy_ids)
        gmasks.append(batch.enemy_mask)
    return L.embed_entities(ad.tensor(batch.own), groups, embeds, params.embed_own,
                            batch.own_ids, gids, gmasks)


@dataclass
class FusedWeights:
    """Per-sequence concatenations of the per-head parameter blocks.

    Build once per rollout or per loss pass; every time step then shares the
    same fused graph nodes (their gradients accumulate across steps).
    """
    attn: tuple | None
    gru: tuple
    act_wq: Tensor
    act_wk: Tensor


def fuse_params(params: AgentNetParams) -> FusedWeights:
    return FusedWeights(
        attn=L.fuse_attention(params.attn) if params.attn is not None else None,
        gru=L.fuse_gru(params.gru),
        act_wq=L._fused(params.w_act_q),
        act_wk=L._fused(params.w_act_k),
    )


def _context(params: AgentNetParams, emb: L.EmbeddingSet, fused: FusedWeights,
             attn_out: list | None = None) -> Tensor:
    if params.kind == "spectra":
        return L.saqa_forward(emb, params.cfg, params.attn, attn_out=attn_out,
                              fused=fused.attn)
    if params.kind == "sa":
        rows = L.self_attention_forward(emb, params.cfg, params.attn,
                                        fused=fused.attn)
        return L.masked_mean(rows, emb.mask)
    return L.masked_mean(emb.ents, emb.mask)


def forward_batch(params: AgentNetParams, batch: ObsBatch, h_prev: Tensor,
                  avail: np.ndarray, attn_out: list | None = None,
                  fused: FusedWeights | None = None
                  ) -> tuple[Tensor, Tensor, np.ndarray]:
    """Batched Q computation.

    ``avail`` is a ``(B, n_own + n_slots)`` legality mask aligned with the
    slot order [own actions; self; allies; enemies]. Returns the masked Q
    tensor ``(B, n_own + n_slots)`` (illegal entries exactly ``-inf``), the
    next hidden state ``(B, d_h)``, and the per-slot entity ids ``(B, n_slots)``.
    """
    if avail.shape != (batch.batch, params.n_own_actions + batch.n_slots):
        raise ad.ShapeError(f"avail mask shape {avail.shape} does not match batch")
    if fused is None:
        fused = fuse_params(params)
    emb = _embed_batch(params, batch)
    ctx = _context(params, emb, fused, attn_out=attn_out)
    h = L.gru_step(ctx, h_prev, params.gru, fused=fused.gru)
    q_own = ad.matmul(h, params.w_own_q)
    cfg = params.cfg
    b, n = emb.mask.shape
    queries = ad.reshape(ad.matmul(h, fused.act_wq), (b, cfg.n_h, cfg.d_k))
    keys = ad.reshape(ad.matmul(emb.ents, fused.act_wk), (b, n, cfg.n_h, cfg.d_k))
    q_act = ad.sum_along(ad.mh_scores(keys, queries), axis=1)
    q_act = ad.scale(q_act, 1.0 / (cfg.n_h * np.sqrt(cfg.d_k)))
    q_full = ad.concat([q_own, q_act], axis=-1)
    q_masked = ad.add(q_full, ad.tensor(np.where(avail, 0.0, ad.NEG_INF)))
    return q_masked, h, emb.ids


def default_avail(params: AgentNetParams, batch: ObsBatch) -> np.ndarray:
    """Permissive mask: all own actions, targeted only on visible enemies."""
    avail = np.zeros((batch.batch, params.n_own_actions + batch.n_slots), dtype=bool)
    avail[:, :params.n_own_actions] = True
    sa = batch.allies.shape[1]
    avail[:, params.n_own_actions + 1 + sa:] = batch.enemy_mask
    return avail


def zero_hidden(params: AgentNetParams, batch_size: int) -> Tensor:
    return ad.tensor(np.zeros((batch_size, params.d_h)))


def _forward_single(params: AgentNetParams, obs: ObservationSet, h_prev,
                    avail: np.ndarray | None, attn_out=None):
    batch = stack_observations([obs])
    if not isinstance(h_prev, Tensor):
        h_prev = ad.tensor(np.asarray(h_prev).reshape(1, params.d_h))
    if avail is None:
        avail = default_avail(params, batch)
    else:
        avail = np.asarray(avail, dtype=bool).reshape(1, -1)
    q, h, ids = forward_batch(params, batch, h_prev, avail, attn_out=attn_out)
    n_own = params.n_own_actions
    qv = q.value[0]
    return ActionValueVector(
        own_values=qv[:n_own].copy(),
        target_ids=ids[0].copy(),
        target_values=qv[n_own:].copy(),
        mask=avail[0].copy(),
    ), h


def agent_forward(params: AgentNetParams, obs: ObservationSet, h_prev,
                  avail: np.ndarray | None = None, attn_out=None):
    """Single-observer forward pass returning (ActionValueVector, HiddenState)."""
    return _forward_single(params, obs, h_prev, avail, attn_out=attn_out)


def greedy_action(q: ActionValueVector) -> ActionChoice:
    """Argmax with deterministic tie-break: own actions first, then ascending id."""
    best_val, best_choice = None, None
    for val, choice in enumerate_actions(q):
        if best_val is None or val > best_val:
            best_val, best_choice = val, choice
    if best_choice is None:
        raise ValueError("all actions masked")
    return best_choice


def enumerate_actions(q: ActionValueVector):
    """Yield (value, choice) over unmasked actions in tie-break order."""
    n_own = q.own_values.shape[0]
    for i in range(n_own):
        if q.mask[i]:
            yield q.own_values[i], ActionChoice(kind="own", index=i)
    order = np.argsort(q.target_ids, kind="stable")
    for j in order:
        if q.mask[n_own + j]:
            yield q.target_values[j], ActionChoice(kind="target", target_id=int(q.target_ids[j]))


def epsilon_greedy(q: ActionValueVector, eps: float, rng: np.random.Generator) -> ActionChoice:
    if eps > 0.0 and rng.random() < eps:
        options = [c for _, c in enumerate_actions(q)]
        if not options:
            raise ValueError("all actions masked")
        return options[rng.integers(len(options))]
    return greedy_action(q)
