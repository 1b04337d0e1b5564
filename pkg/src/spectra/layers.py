"""Network building blocks: linear maps, GRU cell, and the two attention layers.

Everything is batched along a leading axis B. Entity stacks are ``(B, N, d_h)``
tensors whose slot 0 is always the observer itself; a boolean mask marks which
slots are real observations. All layers are pure functions of (params, inputs).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def uniform_init(rng: np.random.Generator, d_in: int, d_out: int | None = None,
                 dtype=np.float64) -> np.ndarray:
    """Fan-in uniform init: U(-1/sqrt(d_in), 1/sqrt(d_in))."""
    bound = 1.0 / np.sqrt(d_in)
    shape = (d_in,) if d_out is None else (d_in, d_out)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class LinearParams:
    weight: Tensor
    bias: Tensor | None = None

    @classmethod
    def create(cls, rng, d_in: int, d_out: int, bias: bool = True, dtype=np.float64):
        w = ad.parameter(uniform_init(rng, d_in, d_out, dtype))
        b = ad.parameter(np.zeros(d_out, dtype=dtype)) if bias else None
        return cls(weight=w, bias=b)

    def apply(self, x: Tensor) -> Tensor:
        out = ad.matmul(x, self.weight)
        if self.bias is not None:
            out = ad.add(out, self.bias)
        return out

    def named_parameters(self, prefix: str):
        yield f"{prefix}/weight", self.weight
        if self.bias is not None:
            yield f"{prefix}/bias", self.bias


@dataclass(frozen=True)
class AttentionConfig:
    d_h: int
    n_h: int

    def __post_init__(self):
        if self.d_h % self.n_h != 0:
            raise ValueError(f"head count {self.n_h} must divide hidden dim {self.d_h}")

    @property
    def d_k(self) -> int:
        return self.d_h // self.n_h


@dataclass
class AttentionParams:
    """Per-head Q/K/V projections (no bias) plus the output LayerNorm affine."""
    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    ln_gain: Tensor
    ln_bias: Tensor

    @classmethod
    def create(cls, rng, cfg: AttentionConfig, dtype=np.float64):
        mk = lambda: ad.parameter(uniform_init(rng, cfg.d_h, cfg.d_k, dtype))
        return cls(
            wq=[mk() for _ in range(cfg.n_h)],
            wk=[mk() for _ in range(cfg.n_h)],
            wv=[mk() for _ in range(cfg.n_h)],
            ln_gain=ad.parameter(np.ones(cfg.d_h, dtype=dtype)),
            ln_bias=ad.parameter(np.zeros(cfg.d_h, dtype=dtype)),
        )

    def named_parameters(self, prefix: str):
        for k in range(len(self.wq)):
            yield f"{prefix}/head{k}/wq", self.wq[k]
            yield f"{prefix}/head{k}/wk", self.wk[k]
            yield f"{prefix}/head{k}/wv", self.wv[k]
        yield f"{prefix}/ln_gain", self.ln_gain
        yield f"{prefix}/ln_bias", self.ln_bias


@dataclass
class GruParams:
    """Gate weights for the input (d_in) and hidden (d) paths, with biases."""
    w_ir: Tensor
    w_iz: Tensor
    w_in: Tensor
    w_hr: Tensor
    w_hz: Tensor
    w_hn: Tensor
    b_ir: Tensor
    b_iz: Tensor
    b_in: Tensor
    b_hr: Tensor
    b_hz: Tensor
    b_hn: Tensor

    @classmethod
    def create(cls, rng, d_in: int, d: int, dtype=np.float64):
        wi = lambda: ad.parameter(uniform_init(rng, d_in, d, dtype))
        wh = lambda: ad.parameter(uniform_init(rng, d, d, dtype))
        b = lambda: ad.parameter(np.zeros(d, dtype=dtype))
        return cls(w_ir=wi(), w_iz=wi(), w_in=wi(),
                   w_hr=wh(), w_hz=wh(), w_hn=wh(),
                   b_ir=b(), b_iz=b(), b_in=b(), b_hr=b(), b_hz=b(), b_hn=b())

    def named_parameters(self, prefix: str):
        for name in ("w_ir", "w_iz", "w_in", "w_hr", "w_hz", "w_hn",
                     "b_ir", "b_iz", "b_in", "b_hr", "b_hz", "b_hn"):
            yield f"{prefix}/{name}", getattr(self, name)


@dataclass
class EmbeddingSet:
    """Embedded entity stack for a batch of observers.

    ``ents[:, 0]`` is the observer's own embedding; ``own`` aliases the same
    graph node. ``mask`` marks visible slots (slot 0 is always visible) and
    ``ids`` carries stable entity identities per slot.
    """
    own: Tensor            # (B, d_h)
    ents: Tensor           # (B, N, d_h)
    mask: np.ndarray       # (B, N) bool
    ids: np.ndarray        # (B, N) int

    @property
    def n_slots(self) -> int:
        return self.ents.shape[1]


def embed_entities(own_feats: Tensor, groups, embeds, own_embed: LinearParams,
                   own_id, group_ids, group_masks) -> EmbeddingSet:
    """Embed an observer batch: own features plus per-class entity groups.

    ``groups``/``embeds``/``group_ids``/``group_masks`` are parallel lists,
    one entry per entity class (allies, enemies). Rows of invisible entities
    must be zero vectors; with bias-free embeddings they stay zero and the
    mask keeps them out of attention.
    """
    own_e = own_embed.apply(own_feats)
    b, d_h = own_e.shape
    parts = [ad.reshape(own_e, (b, 1, d_h))]
    masks = [np.ones((b, 1), dtype=bool)]
    ids = [np.asarray(own_id).reshape(b, 1)]
    for feats, emb, gids, gmask in zip(groups, embeds, group_ids, group_masks):
        if feats.shape[1] == 0:
            continue
        parts.append(emb.apply(feats))
        masks.append(np.asarray(gmask, dtype=bool))
        ids.append(np.asarray(gids))
    ents = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
    return EmbeddingSet(own=own_e, ents=ents,
                        mask=np.concatenate(masks, axis=1),
                        ids=np.concatenate(ids, axis=1))


def _mask_bias(mask: np.ndarray) -> np.ndarray:
    return np.where(mask, 0.0, ad.NEG_INF)


def _fused(tensors: list[Tensor]) -> Tensor:
    return tensors[0] if len(tensors) == 1 else ad.concat(tensors, axis=-1)


def fuse_attention(params: AttentionParams) -> tuple[Tensor, Tensor, Tensor]:
    """Concatenate per-head projections once so forwards share the nodes."""
    return _fused(params.wq), _fused(params.wk), _fused(params.wv)


def fuse_gru(p: GruParams) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    return (ad.concat([p.w_ir, p.w_iz, p.w_in], axis=-1),
            ad.concat([p.b_ir, p.b_iz, p.b_in], axis=-1),
            ad.concat([p.w_hr, p.w_hz, p.w_hn], axis=-1),
            ad.concat([p.b_hr, p.b_hz, p.b_hn], axis=-1))


def saqa_forward(emb: EmbeddingSet, cfg: AttentionConfig, params: AttentionParams,
                 attn_out: list | None = None, fused=None) -> Tensor:
    """Single-query attention: the observer's embedding is the only query.

    Keys/values range over every visible slot (self included). Returns the
    residual LayerNorm combination of the own embedding with the concatenated
    per-head attention readouts, ``(B, d_h)``. If ``attn_out`` is given, the
    per-head weight arrays ``(B, N)`` are appended to it.

    Per-head projections run as one block matmul; column blocks of the fused
    product are exactly the per-head products.
    """
    if not emb.mask[:, 0].all():
        raise ValueError("observer slot must always be visible")
    b, n, _ = emb.ents.shape
    h, dk = cfg.n_h, cfg.d_k
    wq, wk, wv = fused if fused is not None else fuse_attention(params)
    bias = ad.tensor(np.broadcast_to(_mask_bias(emb.mask)[:, None, :], (b, h, n)).copy())
    keys = ad.reshape(ad.matmul(emb.ents, wk), (b, n, h, dk))
    vals = ad.reshape(ad.matmul(emb.ents, wv), (b, n, h, dk))
    query = ad.reshape(ad.matmul(emb.own, wq), (b, h, dk))
    scores = ad.scale(ad.mh_scores(keys, query), 1.0 / np.sqrt(dk))
    weights = ad.softmax(ad.add(scores, bias))          # (B, H, N)
    if attn_out is not None:
        attn_out.extend(weights.value[:, k, :].copy() for k in range(h))
    ctx = ad.reshape(ad.mh_weight(weights, vals), (b, cfg.d_h))
    return ad.layer_norm(ad.add(emb.own, ctx), params.ln_gain, params.ln_bias)


def self_attention_forward(emb: EmbeddingSet, cfg: AttentionConfig,
                           params: AttentionParams, fused=None) -> Tensor:
    """All-pairs attention with residual + LayerNorm per entity, ``(B, N, d_h)``.

    Invisible slots are masked as keys; their output rows are meaningless and
    must be dropped by the caller (the pooling step uses the mask).
    """
    b, n, _ = emb.ents.shape
    h, dk = cfg.n_h, cfg.d_k
    wq, wk, wv = fused if fused is not None else fuse_attention(params)
    key_bias = ad.tensor(np.broadcast_to(
        _mask_bias(emb.mask)[:, None, None, :], (b, h, n, n)).copy())
    queries = ad.reshape(ad.matmul(emb.ents, wq), (b, n, h, dk))
    keys = ad.reshape(ad.matmul(emb.ents, wk), (b, n, h, dk))
    vals = ad.reshape(ad.matmul(emb.ents, wv), (b, n, h, dk))
    scores = ad.scale(ad.mh_scores_full(queries, keys), 1.0 / np.sqrt(dk))
    weights = ad.softmax(ad.add(scores, key_bias))      # (B, H, N, N)
    ctx = ad.reshape(ad.mh_weight_full(weights, vals), (b, n, cfg.d_h))
    return ad.layer_norm(ad.add(emb.ents, ctx), params.ln_gain, params.ln_bias)


def masked_mean(rows: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over visible slots: ``(B, N, d) -> (B, d)``."""
    counts = mask.sum(axis=1, keepdims=True)
    if (counts == 0).any():
        raise ValueError("cannot pool over zero visible entities")
    weights = ad.tensor(mask.astype(np.float64) / counts)
    return ad.bweight(weights, rows)


def gru_step(x: Tensor, h_prev: Tensor, p: GruParams, fused=None) -> Tensor:
    """Standard GRU cell update, ``(B, d_in) x (B, d) -> (B, d)``.

    The three gates run as one fused matmul per path and are sliced apart.
    """
    d = h_prev.shape[-1]
    wi, bi, wh, bh = fused if fused is not None else fuse_gru(p)
    xw = ad.add(ad.matmul(x, wi), bi)
    hw = ad.add(ad.matmul(h_prev, wh), bh)
    r = ad.sigmoid(ad.add(ad.slice_last(xw, 0, d), ad.slice_last(hw, 0, d)))
    z = ad.sigmoid(ad.add(ad.slice_last(xw, d, 2 * d), ad.slice_last(hw, d, 2 * d)))
    n = ad.tanh(ad.add(ad.slice_last(xw, 2 * d, 3 * d),
                       ad.mul(r, ad.slice_last(hw, 2 * d, 3 * d))))
    one_minus_z = ad.sub(ad.tensor(np.ones_like(z.value)), z)
    return ad.add(ad.mul(one_minus_z, n), ad.mul(z, h_prev))
