"""Joint-action-value mixers.

* ``vdn``     - additive decomposition, joint Q is the plain sum.
* ``spectra`` - two mixing layers whose weights/biases are generated from the
  per-agent global state by attention-style hypernetworks. Weight entries are
  absolute values, so the joint value is monotone in every agent Q; queries,
  keys and seed vectors make the whole map permutation-invariant and usable
  at any team size with one parameter set.
* ``qmix``    - fixed-size baseline: MLP hypernetworks over the flat state;
  parameter shapes are tied to the team size chosen at construction.

The global state is an ``(m, d_s)`` array, one row per (ally) agent, in the
same order as the agent Q vector.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers as L
from .autodiff import Tensor

MIXER_KINDS = ("vdn", "spectra", "qmix")


def vdn_mix(q) -> float:
    """Sum of agent values; the linear decomposition baseline."""
    q = np.asarray(q, dtype=np.float64)
    if q.size == 0:
        raise ValueError("vdn_mix needs at least one agent value")
    return float(q.sum())


def vdn_mix_batch(q: Tensor) -> Tensor:
    if q.shape[-1] == 0:
        raise ValueError("vdn_mix needs at least one agent value")
    return ad.sum_along(q, axis=-1)


@dataclass
class StHyperParams:
    """One hypernetwork head stack generating a weight block and a bias vector.

    ``query_kind`` selects how weight queries are formed: ``"state"`` queries
    every agent row (yields an m x m block), ``"seed"`` queries with a single
    learnable vector (yields an m column). Bias generation always couples a
    learnable seed with state-derived keys.
    """
    d_state: int
    d_mix: int
    n_h: int
    query_kind: str
    w_query: list[Tensor] | None
    w_seed: list[Tensor] | None
    w_key: list[Tensor]
    b_seed: list[Tensor]
    b_key: list[Tensor]

    @classmethod
    def create(cls, rng, d_state: int, d_mix: int, n_h: int, query_kind: str,
               dtype=np.float64) -> "StHyperParams":
        if d_mix % n_h != 0:
            raise ValueError("head count must divide the mixing dim")
        if query_kind not in ("state", "seed"):
            raise ValueError(f"bad query_kind {query_kind!r}")
        dp = d_mix // n_h
        lin = lambda: ad.parameter(L.uniform_init(rng, d_state, dp, dtype))
        seed = lambda: ad.parameter(rng.normal(0.0, 1.0 / np.sqrt(dp), size=dp).astype(dtype))
        return cls(
            d_state=d_state, d_mix=d_mix, n_h=n_h, query_kind=query_kind,
            w_query=[lin() for _ in range(n_h)] if query_kind == "state" else None,
            w_seed=[seed() for _ in range(n_h)] if query_kind == "seed" else None,
            w_key=[lin() for _ in range(n_h)],
            b_seed=[seed() for _ in range(n_h)],
            b_key=[lin() for _ in range(n_h)],
        )

    @property
    def d_head(self) -> int:
        return self.d_mix // self.n_h

    def named_parameters(self, prefix: str):
        for k in range(self.n_h):
            if self.w_query is not None:
                yield f"{prefix}/head{k}/w_query", self.w_query[k]
            if self.w_seed is not None:
                yield f"{prefix}/head{k}/w_seed", self.w_seed[k]
            yield f"{prefix}/head{k}/w_key", self.w_key[k]
            yield f"{prefix}/head{k}/b_seed", self.b_seed[k]
            yield f"{prefix}/head{k}/b_key", self.b_key[k]


def st_hypernet_batch(state: Tensor, params: StHyperParams, mode: str) -> Tensor:
    """Generate mixing weights or biases from the state, ``(B, m, d_s)`` in.

    weights mode: nonnegative ``(B, m, m)`` for state queries or ``(B, m)``
    for a seed query. bias mode: sign-unconstrained ``(B, m)``.
    """
    if state.value.ndim != 3 or state.shape[-1] != params.d_state:
        raise ad.ShapeError(f"state shape {state.shape} != (B, m, {params.d_state})")
    if mode == "weights":
        total = None
        for k in range(params.n_h):
            keys = ad.matmul(state, params.w_key[k])                 # (B, m, d')
            if params.query_kind == "state":
                queries = ad.matmul(state, params.w_query[k])
                term = ad.abs_(ad.pairwise(queries, keys))           # (B, m, m)
            else:
                b, m, dp = keys.shape
                col = ad.matmul(keys, ad.reshape(params.w_seed[k], (dp, 1)))
                term = ad.abs_(ad.reshape(col, (b, m)))              # (B, m)
            total = term if total is None else ad.add(total, term)
        return ad.scale(total, 1.0 / (params.n_h * np.sqrt(params.d_head)))
    if mode == "bias":
        total = None
        for k in range(params.n_h):
            keys = ad.matmul(state, params.b_key[k])
            b, m, dp = keys.shape
            col = ad.reshape(ad.matmul(keys, ad.reshape(params.b_seed[k], (dp, 1))), (b, m))
            total = col if total is None else ad.add(total, col)
        return ad.scale(total, 1.0 / (params.n_h * np.sqrt(params.d_mix)))
    raise ValueError(f"bad mode {mode!r}")


def st_hypernet(state: np.ndarray, params: StHyperParams, mode: str) -> np.ndarray:
    """Single-instance convenience wrapper over :func:`st_hypernet_batch`."""
    state = np.asarray(state, dtype=np.float64)
    if state.shape[0] < 1:
        raise ValueError("need at least one agent row")
    with ad.no_grad():
        out = st_hypernet_batch(ad.tensor(state[None]), params, mode)
    return out.value[0]


@dataclass
class SpectraMixParams:
    """Two hypernetwork stacks: pairwise first layer, seed-queried second."""
    hyper1: StHyperParams
    hyper2: StHyperParams

    @classmethod
    def create(cls, rng, d_state: int, d_mix: int = 32, n_h: int = 4,
               dtype=np.float64) -> "SpectraMixParams":
        return cls(
            hyper1=StHyperParams.create(rng, d_state, d_mix, n_h, "state", dtype),
            hyper2=StHyperParams.create(rng, d_state, d_mix, n_h, "seed", dtype),
        )

    def named_parameters(self):
        yield from self.hyper1.named_parameters("mixer/hyper1")
        yield from self.hyper2.named_parameters("mixer/hyper2")

    def parameter_count(self) -> int:
        return sum(t.value.size for _, t in self.named_parameters())


def spectra_mix_batch(q: Tensor, state: Tensor, params: SpectraMixParams) -> Tensor:
    """Monotone two-layer mixing with generated weights, ``(B, m) -> (B,)``."""
    if q.shape != state.shape[:2]:
        raise ad.ShapeError(f"q {q.shape} does not match state rows {state.shape}")
    w1 = st_hypernet_batch(state, params.hyper1, "weights")      # (B, m, m) >= 0
    b1 = st_hypernet_batch(state, params.hyper1, "bias")         # (B, m)
    hidden = ad.relu(ad.add(ad.vecmat(q, w1), b1))               # (B, m)
    w2 = st_hypernet_batch(state, params.hyper2, "weights")      # (B, m) >= 0
    b2 = ad.mean_along(st_hypernet_batch(state, params.hyper2, "bias"), axis=-1)
    return ad.add(ad.sum_along(ad.mul(hidden, w2), axis=-1), b2)


def spectra_mix(q: np.ndarray, state: np.ndarray, params: SpectraMixParams) -> float:
    q = np.asarray(q, dtype=np.float64)
    state = np.asarray(state, dtype=np.float64)
    with ad.no_grad():
        out = spectra_mix_batch(ad.tensor(q[None]), ad.tensor(state[None]), params)
    return float(out.value[0])


@dataclass
class QmixParams:
    """Fixed-size MLP-hypernetwork mixer; rejects any other team size."""
    m: int
    d_state_flat: int
    embed: int
    hyper_w1_l1: L.LinearParams
    hyper_w1_l2: L.LinearParams
    hyper_b1: L.LinearParams
    hyper_w2_l1: L.LinearParams
    hyper_w2_l2: L.LinearParams
    v_l1: L.LinearParams
    v_l2: L.LinearParams

    @classmethod
    def create(cls, rng, m: int, d_state_flat: int, embed: int = 32,
               hyper_embed: int = 64, dtype=np.float64) -> "QmixParams":
        mk = lambda i, o: L.LinearParams.create(rng, i, o, bias=True, dtype=dtype)
        return cls(
            m=m, d_state_flat=d_state_flat, embed=embed,
            hyper_w1_l1=mk(d_state_flat, hyper_embed),
            hyper_w1_l2=mk(hyper_embed, m * embed),
            hyper_b1=mk(d_state_flat, embed),
            hyper_w2_l1=mk(d_state_flat, hyper_embed),
            hyper_w2_l2=mk(hyper_embed, embed),
            v_l1=mk(d_state_flat, embed),
            v_l2=mk(embed, 1),
        )

    def named_parameters(self):
        for name in ("hyper_w1_l1", "hyper_w1_l2", "hyper_b1", "hyper_w2_l1",
                     "hyper_w2_l2", "v_l1", "v_l2"):
            yield from getattr(self, name).named_parameters(f"mixer/{name}")

    def parameter_count(self) -> int:
        return sum(t.value.size for _, t in self.named_parameters())


def qmix_mlp_mix_batch(q: Tensor, flat_state: Tensor, params: QmixParams) -> Tensor:
    b, m = q.shape
    if m != params.m:
        raise ValueError("non-scalable mixer: team size differs from construction")
    if flat_state.shape != (b, params.d_state_flat):
        raise ad.ShapeError(f"flat state shape {flat_state.shape}")
    w1 = ad.abs_(params.hyper_w1_l2.apply(ad.relu(params.hyper_w1_l1.apply(flat_state))))
    w1 = ad.reshape(w1, (b, m, params.embed))
    b1 = params.hyper_b1.apply(flat_state)
    hidden = ad.relu(ad.add(ad.vecmat(q, w1), b1))               # (B, embed)
    w2 = ad.abs_(params.hyper_w2_l2.apply(ad.relu(params.hyper_w2_l1.apply(flat_state))))
    v = ad.reshape(params.v_l2.apply(ad.relu(params.v_l1.apply(flat_state))), (b,))
    return ad.add(ad.sum_along(ad.mul(hidden, w2), axis=-1), v)


def qmix_mlp_mix(q: np.ndarray, flat_state: np.ndarray, params: QmixParams) -> float:
    q = np.asarray(q, dtype=np.float64)
    flat_state = np.asarray(flat_state, dtype=np.float64)
    with ad.no_grad():
        out = qmix_mlp_mix_batch(ad.tensor(q[None]), ad.tensor(flat_state[None]), params)
    return float(out.value[0])


def mix_batch(kind: str, params, q: Tensor, states: Tensor) -> Tensor:
    """Uniform mixer entry point for the trainer: ``(B, m) -> (B,)``."""
    if kind == "vdn":
        return vdn_mix_batch(q)
    if kind == "spectra":
        return spectra_mix_batch(q, states, params)
    if kind == "qmix":
        b, m, d_s = states.shape
        return qmix_mlp_mix_batch(q, ad.reshape(states, (b, m * d_s)), params)
    raise ValueError(f"unknown mixer kind {kind!r}")


def create_mixer(kind: str, rng, d_state: int, m: int, d_mix: int = 32,
                 n_h: int = 4, dtype=np.float64):
    """Build mixer params for ``kind`` (``None`` for the parameterless vdn)."""
    if kind == "vdn":
        return None
    if kind == "spectra":
        return SpectraMixParams.create(rng, d_state, d_mix=d_mix, n_h=n_h, dtype=dtype)
    if kind == "qmix":
        return QmixParams.create(rng, m, m * d_state, dtype=dtype)
    raise ValueError(f"unknown mixer kind {kind!r}")


def mixer_named_parameters(kind: str, params):
    if kind == "vdn" or params is None:
        return iter(())
    return params.named_parameters()
