"""Verification surface: permutation propositions, complexity fits, timing.

Every claim the networks make is machine-checked here: the four permutation
properties (attention invariance, action-head equivariance, hypernetwork
equivariance, mixer invariance), the monotonicity of the mixing map, the
linear-vs-quadratic MAC growth of the two attention layers, and the
wall-clock ordering of agent forward passes.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from . import agent as A
from . import autodiff as ad
from . import env as E
from . import layers as L
from . import mixer as M

PROP_TOLERANCE = 1e-9
EXHAUSTIVE_LIMIT = 5          # group sizes up to this get every permutation
SAMPLED_PERMS = 50
JOINT_PAIR_LIMIT = 130


@dataclass
class PropReport:
    prop_id: str
    instances: int
    permutations: int
    max_abs_deviation: float
    tolerance: float = PROP_TOLERANCE
    counterexample_seed: int | None = None

    @property
    def passed(self) -> bool:
        return self.max_abs_deviation < self.tolerance

    def to_dict(self) -> dict:
        return {"prop_id": self.prop_id, "instances": self.instances,
                "permutations": self.permutations,
                "max_abs_deviation": self.max_abs_deviation,
                "tolerance": self.tolerance, "passed": self.passed,
                "counterexample_seed": self.counterexample_seed}


def _group_perms(size: int, rng: np.random.Generator):
    if size <= 1:
        return [tuple(range(size))]
    if size <= EXHAUSTIVE_LIMIT:
        return list(itertools.permutations(range(size)))
    perms = [tuple(range(size))]
    perms += [tuple(rng.permutation(size)) for _ in range(SAMPLED_PERMS)]
    return perms

def _perm_pairs(n_allies: int, n_enemies: int, rng: np.random.Generator):
    """(ally perm, enemy perm) pairs: joint-exhaustive when small, else both
    single-group exhaustive sweeps plus sampled joint pairs."""
    ap = _group_perms(n_allies, rng)
    ep = _group_perms(n_enemies, rng)
    if len(ap) * len(ep) <= JOINT_PAIR_LIMIT:
        return [(a, e) for a in ap for e in ep]
    ident_a = tuple(range(n_allies))
    ident_e = tuple(range(n_enemies))
    pairs = [(a, ident_e) for a in ap] + [(ident_a, e) for e in ep]
    pairs += [(tuple(rng.permutation(n_allies)), tuple(rng.permutation(n_enemies)))
              for _ in range(SAMPLED_PERMS)]
    return pairs


def _random_obs(rng, n_allies, n_enemies):
    allies = tuple(A.EntityObs(10 + j, rng.standard_normal(E.D_OTHER), True)
                   for j in range(n_allies))
    enemies = tuple(A.EntityObs(100 + j, rng.standard_normal(E.D_OTHER), True)
                    for j in range(n_enemies))
    return A.ObservationSet(own_id=0, own=rng.standard_normal(E.D_OWN),
                            allies=allies, enemies=enemies)


def _permuted_obs(obs, ally_perm, enemy_perm):
    return A.ObservationSet(
        own_id=obs.own_id, own=obs.own,
        allies=tuple(obs.allies[i] for i in ally_perm),
        enemies=tuple(obs.enemies[i] for i in enemy_perm))


def _agent_devs(params, obs, pairs):
    """(saqa invariance dev, action-head equivariance dev) over perm pairs."""
    with ad.no_grad():
        batch = A.stack_observations([obs])
        emb = A._embed_batch(params, batch)
        ctx_base = L.saqa_forward(emb, params.cfg, params.attn).value
        q_base, h_base = A.agent_forward(params, obs, np.zeros(params.d_h))
        base_by_id = {int(i): v for i, v in zip(q_base.target_ids, q_base.target_values)}
        dev_inv = dev_eq = 0.0
        for ap, ep in pairs:
            pobs = _permuted_obs(obs, ap, ep)
            pbatch = A.stack_observations([pobs])
            pemb = A._embed_batch(params, pbatch)
            ctx = L.saqa_forward(pemb, params.cfg, params.attn).value
            dev_inv = max(dev_inv, float(np.max(np.abs(ctx - ctx_base))))
            q, h = A.agent_forward(params, pobs, np.zeros(params.d_h))
            dev_eq = max(dev_eq, float(np.max(np.abs(q.own_values - q_base.own_values))),
                         float(np.max(np.abs(h.value - h_base.value))))
            for i, v in zip(q.target_ids, q.target_values):
                want = base_by_id[int(i)]
                if np.isfinite(want) or np.isfinite(v):
                    dev_eq = max(dev_eq, abs(v - want))
    return dev_inv, dev_eq


def _mixer_devs(mix_params, m, rng, perms):
    with ad.no_grad():
        state = rng.standard_normal((m, E.D_STATE))
        q = rng.standard_normal(m)
        w_base = M.st_hypernet(state, mix_params.hyper1, "weights")
        b_base = M.st_hypernet(state, mix_params.hyper1, "bias")
        joint_base = M.spectra_mix(q, state, mix_params)
        dev_eq = dev_inv = 0.0
        for perm in perms:
            perm = list(perm)
            w = M.st_hypernet(state[perm], mix_params.hyper1, "weights")
            b = M.st_hypernet(state[perm], mix_params.hyper1, "bias")
            dev_eq = max(dev_eq,
                         float(np.max(np.abs(w - w_base[np.ix_(perm, perm)]))),
                         float(np.max(np.abs(b - b_base[perm]))))
            dev_inv = max(dev_inv, abs(M.spectra_mix(q[perm], state[perm], mix_params)
                                       - joint_base))
    return dev_eq, dev_inv


def check_propositions(seeds: int | range, sizes: list[tuple[int, int]],
                       d_h: int = 16, n_h: int = 2) -> list[PropReport]:
    """Check all four permutation propositions on random instances.

    ``sizes`` holds (m, n) pairs: m agents among n total entities, so each
    observer sees m-1 allies and n-m enemies; the mixer works on m state rows.
    Group permutations are exhaustive up to size 5, sampled beyond. ``seeds``
    may be a range so shards of one sweep can run in parallel.
    """
    if not sizes:
        raise ValueError("need at least one (m, n) size")
    seed_range = range(seeds) if isinstance(seeds, int) else seeds
    trackers = {pid: [0.0, None] for pid in
                ("saqa-invariance", "decoupling-equivariance",
                 "hypernet-equivariance", "mixer-invariance")}
    instances = 0
    permutations = 0
    for seed in seed_range:
        for m, n in sizes:
            if n <= m:
                raise ValueError(f"need more entities than agents, got {(m, n)}")
            rng = np.random.default_rng([seed, m, n])
            params = A.AgentNetParams.create(rng, "spectra", E.D_OWN, E.D_OTHER,
                                             E.D_OTHER, d_h=d_h, n_h=n_h,
                                             n_own_actions=E.N_OWN_ACTIONS)
            mix_params = M.SpectraMixParams.create(rng, E.D_STATE, d_mix=8, n_h=2)
            obs = _random_obs(rng, m - 1, n - m)
            pairs = _perm_pairs(m - 1, n - m, rng)
            dev_inv, dev_eq = _agent_devs(params, obs, pairs)
            mixer_perms = _group_perms(m, rng)
            dev_hyper, dev_mix = _mixer_devs(mix_params, m, rng, mixer_perms)
            instances += 1
            permutations += len(pairs) + len(mixer_perms)
            for pid, dev in (("saqa-invariance", dev_inv),
                             ("decoupling-equivariance", dev_eq),
                             ("hypernet-equivariance", dev_hyper),
                             ("mixer-invariance", dev_mix)):
                if dev > trackers[pid][0]:
                    trackers[pid] = [dev, seed if dev >= PROP_TOLERANCE else None]
    return [PropReport(prop_id=pid, instances=instances, permutations=permutations,
                       max_abs_deviation=dev, counterexample_seed=ce)
            for pid, (dev, ce) in trackers.items()]


def qmix_invariance_report(trials: int = 100, m: int = 3) -> PropReport:
    """Baseline contrast: the fixed-size mixer is expected to FAIL invariance."""
    worst = 0.0
    counterexample = None
    rng = np.random.default_rng(0)
    params = M.QmixParams.create(rng, m, m * E.D_STATE, embed=8, hyper_embed=16)
    for trial in range(trials):
        trng = np.random.default_rng([4, trial])
        q = trng.standard_normal(m)
        s = trng.standard_normal(m * E.D_STATE)
        base = M.qmix_mlp_mix(q, s, params)
        perm = list(trng.permutation(m))
        dev = abs(M.qmix_mlp_mix(q[perm], s, params) - base)
        if dev > worst:
            worst = dev
            counterexample = trial
    return PropReport(prop_id="mixer-invariance[qmix-baseline]", instances=trials,
                      permutations=trials, max_abs_deviation=worst,
                      counterexample_seed=counterexample)


def monotonicity_report(instances: int = 1000) -> dict:
    """Sign of the autodiff gradient of the mixed value w.r.t. every agent Q."""
    violations = 0
    min_grad = np.inf
    for k in range(instances):
        rng = np.random.default_rng([7, k])
        m = int(rng.integers(1, 9))
        params = M.SpectraMixParams.create(rng, E.D_STATE, d_mix=8, n_h=2)
        q = ad.parameter(rng.standard_normal((1, m)))
        s = ad.tensor(rng.standard_normal((1, m, E.D_STATE)))
        ad.sum_all(M.spectra_mix_batch(q, s, params)).backward()
        min_grad = min(min_grad, float(q.grad.min()))
        if (q.grad < 0.0).any():
            violations += 1
    return {"instances": instances, "violations": violations,
            "min_gradient": min_grad}


# -- complexity -----------------------------------------------------------------


@dataclass
class FitReport:
    layer: str
    n_values: list[int]
    macs: list[int]
    affine_residual: float
    quadratic_residual: float
    doubling_ratios: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"layer": self.layer, "n_values": self.n_values, "macs": self.macs,
                "affine_residual": self.affine_residual,
                "quadratic_residual": self.quadratic_residual,
                "doubling_ratios": {str(k): v for k, v in self.doubling_ratios.items()}}


def layer_mac_count(layer: str, n: int, cfg: L.AttentionConfig,
                    rng: np.random.Generator) -> int:
    """MACs of one forward pass over n fully visible entities."""
    params = L.AttentionParams.create(rng, cfg)
    ents_val = rng.standard_normal((1, n, cfg.d_h))
    emb = L.EmbeddingSet(own=ad.tensor(ents_val[:, 0]), ents=ad.tensor(ents_val),
                         mask=np.ones((1, n), dtype=bool),
                         ids=np.arange(n)[None, :])
    with ad.no_grad(), ad.count_macs() as counter:
        if layer == "saqa":
            L.saqa_forward(emb, cfg, params)
        elif layer == "self_attention":
            L.self_attention_forward(emb, cfg, params)
        else:
            raise ValueError(f"unknown layer {layer!r}")
    return counter.total


def complexity_fit(layer: str, n_values: list[int],
                   cfg: L.AttentionConfig | None = None) -> FitReport:
    """Least-squares fits of MAC(n) against affine and quadratic models."""
    if len(set(n_values)) < 4:
        raise ValueError("need at least 4 distinct n values")
    cfg = cfg or L.AttentionConfig(d_h=2, n_h=1)
    rng = np.random.default_rng(0)
    n_values = sorted(set(n_values))
    macs = [layer_mac_count(layer, n, cfg, rng) for n in n_values]

    def residual(degree):
        coeffs = np.polyfit(n_values, macs, degree)
        pred = np.polyval(coeffs, n_values)
        return float(np.max(np.abs(pred - macs)))

    ratios = {}
    by_n = dict(zip(n_values, macs))
    for n in n_values:
        if 2 * n in by_n:
            ratios[n] = by_n[2 * n] / by_n[n]
    return FitReport(layer=layer, n_values=list(n_values), macs=macs,
                     affine_residual=residual(1), quadratic_residual=residual(2),
                     doubling_ratios=ratios)


# -- wall clock -----------------------------------------------------------------


def inference_bench(models: list[str], n_values: list[int], samples: int = 1000,
                    warmup: int = 20, d_h: int = 64, n_h: int = 4) -> list[dict]:
    """Median/IQR single-observer forward latency per (model, entity count)."""
    rows = []
    for kind in models:
        rng = np.random.default_rng(1)
        params = A.AgentNetParams.create(rng, kind, E.D_OWN, E.D_OTHER, E.D_OTHER,
                                         d_h=d_h, n_h=n_h,
                                         n_own_actions=E.N_OWN_ACTIONS)
        for n in n_values:
            obs = _random_obs(rng, n_allies=(n - 1) // 2,
                              n_enemies=n - 1 - (n - 1) // 2)
            h0 = np.zeros(d_h)
            for _ in range(warmup):
                A.agent_forward(params, obs, h0)
            times = np.empty(samples)
            for k in range(samples):
                t0 = time.perf_counter()
                A.agent_forward(params, obs, h0)
                times[k] = time.perf_counter() - t0
            q1, med, q3 = np.percentile(times, [25, 50, 75])
            rows.append({"model": kind, "n": n, "median_s": float(med),
                         "iqr_s": float(q3 - q1), "samples": samples})
    return rows
