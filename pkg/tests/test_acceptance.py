"""Acceptance gate: every release criterion, one test each, pass/fail lines.

Cheap structural criteria run first; the training-based criteria at the end
dominate the runtime (tens of minutes on a 2-core desktop CPU).
"""
import copy
import time

import numpy as np
import pytest

import acceptance_report as rep
from _oracles import finite_difference_grad, max_rel_err
from spectra import agent as A
from spectra import autodiff as ad
from spectra import bench as B
from spectra import checkpoint as ckpt
from spectra import env as E
from spectra import experiments as X
from spectra import layers as L
from spectra import mixer as M
from spectra import trainer as T

PROP_SIZES = [(2, 4), (3, 5), (4, 5), (8, 16)]


class TestPropositionSuite:
    def test_all_propositions_within_tolerance_and_time(self):
        t0 = time.monotonic()
        reports = B.check_propositions(seeds=100, sizes=PROP_SIZES)
        elapsed = time.monotonic() - t0
        worst = max(r.max_abs_deviation for r in reports)
        ok = all(r.passed for r in reports) and elapsed < 120.0
        rep.record("proposition-suite",
                   ok, f"max deviation {worst:.2e}, {elapsed:.0f}s")
        for r in reports:
            assert r.passed, f"{r.prop_id}: {r.max_abs_deviation}"
        assert elapsed < 120.0, f"proposition suite took {elapsed:.0f}s"


class TestBaselineContrast:
    def test_qmix_baseline_fails_invariance_within_100_trials(self):
        report = B.qmix_invariance_report(trials=100)
        ok = (not report.passed) and report.counterexample_seed is not None
        rep.record("baseline-contrast",
                   ok, f"counterexample trial {report.counterexample_seed}, "
                       f"deviation {report.max_abs_deviation:.2e}")
        assert ok


class TestMonotonicity:
    def test_gradient_sign_on_1000_instances(self):
        out = B.monotonicity_report(instances=1000)
        ok = out["violations"] == 0
        rep.record("monotonicity", ok,
                   f"{out['violations']} violations, min grad {out['min_gradient']:.2e}")
        assert ok


class TestGradientSuite:
    def test_per_layer_and_end_to_end_within_time(self):
        t0 = time.monotonic()
        rng = np.random.default_rng(0)

        worst_layer = 0.0

        def project_and_check(build, arrays, tol):
            nonlocal worst_layer
            tensors = [ad.parameter(a.copy()) for a in arrays]
            out = build(*tensors)
            proj = rng.standard_normal(out.shape)
            ad.sum_all(ad.mul(out, ad.tensor(proj))).backward()
            for i, a in enumerate(arrays):
                def f(x, i=i):
                    with ad.no_grad():
                        ts = [ad.tensor(arrays[j] if j != i else x)
                              for j in range(len(arrays))]
                        return float(ad.sum_all(ad.mul(build(*ts),
                                                       ad.tensor(proj))).value)
                err = max_rel_err(tensors[i].grad,
                                  finite_difference_grad(f, a.copy()))
                worst_layer = max(worst_layer, err)
                assert err < tol

        project_and_check(ad.matmul, [rng.standard_normal((3, 4)),
                                      rng.standard_normal((4, 2))], 1e-4)
        project_and_check(ad.softmax, [rng.standard_normal((3, 5))], 1e-4)
        project_and_check(ad.layer_norm, [rng.standard_normal((2, 6)),
                                          rng.standard_normal(6),
                                          rng.standard_normal(6)], 1e-4)
        project_and_check(ad.relu, [rng.standard_normal((3, 4)) + 0.1], 1e-4)
        project_and_check(ad.abs_, [rng.standard_normal((3, 4)) + 0.1], 1e-4)
        project_and_check(ad.sigmoid, [rng.standard_normal((3, 4))], 1e-4)
        project_and_check(ad.tanh, [rng.standard_normal((3, 4))], 1e-4)

        gru = L.GruParams.create(rng, 4, 4)
        project_and_check(lambda x, h: L.gru_step(x, h, gru),
                          [rng.standard_normal((2, 4)),
                           rng.standard_normal((2, 4))], 1e-4)

        cfg = L.AttentionConfig(d_h=6, n_h=2)
        attn = L.AttentionParams.create(rng, cfg)

        def saqa(ents):
            picked = ad.bweight(ad.tensor(np.eye(3)[[0]].repeat(2, axis=0)), ents)
            emb = L.EmbeddingSet(own=picked, ents=ents,
                                 mask=np.ones((2, 3), dtype=bool),
                                 ids=np.tile(np.arange(3), (2, 1)))
            return L.saqa_forward(emb, cfg, attn)

        project_and_check(saqa, [rng.standard_normal((2, 3, 6))], 1e-4)

        # end-to-end TD gradient through agent + mixer
        tcfg = T.TrainConfig(
            stages=[T.TrainStage(E.EnvConfig(m=2, e=2, max_steps=6, seed=3), 1.0)],
            total_steps=0, agent_kind="spectra", mixer_kind="spectra",
            batch_size=2, min_buffer=2, d_h=8, n_h=2, mix_embed=8, mix_heads=2,
            seed=0)
        agent_params, mixer_params = T.build_networks(tcfg)
        # live mixing relus (env states are nonnegative): no vacuous FD probes
        for k in range(mixer_params.hyper1.n_h):
            mixer_params.hyper1.b_key[k].value[:] = np.abs(
                mixer_params.hyper1.b_key[k].value)
            mixer_params.hyper1.b_seed[k].value[:] = np.abs(
                mixer_params.hyper1.b_seed[k].value) + 0.5
        env = E.MicroBattleEnv(tcfg.stages[0].env_cfg)
        episodes = [T.rollout(env, agent_params, 0.4, np.random.default_rng(k),
                              episode_seed=k) for k in range(2)]
        target_agent = copy.deepcopy(agent_params)
        target_mixer = copy.deepcopy(mixer_params)
        loss, _ = T.td_loss(episodes, agent_params, "spectra", mixer_params,
                            target_agent, target_mixer, 0.99)
        loss.backward()
        worst_e2e = 0.0
        for tensor in (agent_params.w_act_q[0], agent_params.gru.w_in,
                       mixer_params.hyper1.w_key[0]):
            base = tensor.value.copy()
            idx = 1 % tensor.value.size
            h = 1e-6

            def f(v):
                tensor.value.reshape(-1)[idx] = v
                with ad.no_grad():
                    out, _ = T.td_loss(episodes, agent_params, "spectra",
                                       mixer_params, target_agent, target_mixer,
                                       0.99)
                return float(out.value)

            v0 = base.reshape(-1)[idx]
            fd = (f(v0 + h) - f(v0 - h)) / (2 * h)
            tensor.value[...] = base
            got = tensor.grad.reshape(-1)[idx]
            assert abs(fd) > 1e-10, "vacuous end-to-end probe point"
            err = abs(got - fd) / abs(fd)
            worst_e2e = max(worst_e2e, err)
            assert err < 1e-3

        elapsed = time.monotonic() - t0
        ok = elapsed < 60.0
        rep.record("gradient-suite", ok,
                   f"layer max rel err {worst_layer:.2e}, "
                   f"end-to-end {worst_e2e:.2e}, {elapsed:.0f}s")
        assert ok, f"gradient suite took {elapsed:.0f}s"


class TestComplexity:
    def test_mac_doubling_ratios(self):
        saqa = B.complexity_fit("saqa", [8, 16, 32, 64])
        sa = B.complexity_fit("self_attention", [8, 16, 32, 64])
        r_saqa = saqa.doubling_ratios[16]
        r_sa = sa.doubling_ratios[16]
        ok = 1.9 <= r_saqa <= 2.1 and 3.6 <= r_sa <= 4.2
        rep.record("complexity-macs", ok,
                   f"saqa 16->32 ratio {r_saqa:.3f}, self-attn {r_sa:.3f}")
        assert ok

    def test_wall_clock_ordering_at_n40(self):
        rows = B.inference_bench(["spectra", "sa"], [40], samples=1000, warmup=20,
                                 d_h=64, n_h=4)
        by_model = {r["model"]: r["median_s"] for r in rows}
        ok = by_model["spectra"] < by_model["sa"]
        rep.record("complexity-wall-clock", ok,
                   f"saqa {by_model['spectra']*1e6:.0f}us < "
                   f"self-attn {by_model['sa']*1e6:.0f}us at n=40")
        assert ok


class TestParameterInvariance:
    def _signature(self, tmp_path, mixer_kind, m, name):
        stage = T.TrainStage(E.EnvConfig(m=m, e=m, max_steps=8, seed=0), 1.0)
        cfg = T.TrainConfig(stages=[stage], total_steps=0, agent_kind="spectra",
                            mixer_kind=mixer_kind, d_h=16, n_h=2,
                            mix_embed=8, mix_heads=2, seed=0)
        agent_params, mixer_params = T.build_networks(cfg)
        path = tmp_path / name
        ckpt.save_manifest(path,
                           T.all_named_parameters(agent_params, mixer_kind,
                                                  mixer_params),
                           meta=T.checkpoint_meta(cfg, 0))
        return ckpt.manifest_signature(path)

    def test_scalable_manifests_identical_fixed_size_differs(self, tmp_path):
        sig3 = self._signature(tmp_path, "spectra", 3, "s3.spck")
        sig6 = self._signature(tmp_path, "spectra", 6, "s6.spck")
        q3 = self._signature(tmp_path, "qmix", 3, "q3.spck")
        q6 = self._signature(tmp_path, "qmix", 6, "q6.spck")
        ok = sig3 == sig6 and q3 != q6
        rep.record("parameter-invariance", ok,
                   f"scalable manifest {len(sig3)} entries identical across "
                   f"3v3/6v6; qmix differs")
        assert sig3 == sig6
        assert q3 != q6


class TestDeterminism:
    def test_metrics_reproduce_byte_identically(self, tmp_path):
        stage = T.TrainStage(E.EnvConfig(m=2, e=2, max_steps=8, seed=5), 1.0)
        cfg = T.TrainConfig(stages=[stage], total_steps=400, batch_size=4,
                            min_buffer=4, buffer_capacity=32, train_every=1,
                            target_interval=5, d_h=8, n_h=2, seed=7,
                            deterministic=True)
        a1 = T.train(cfg, tmp_path / "d1")
        a2 = T.train(cfg, tmp_path / "d2")
        b1 = open(a1.metrics_path, "rb").read()
        b2 = open(a2.metrics_path, "rb").read()
        ok = b1 == b2 and a1.param_hash == a2.param_hash
        rep.record("determinism", ok,
                   f"{len(b1)} metric bytes identical, param hash "
                   f"{a1.param_hash[:12]}")
        assert ok


class TestLearningSmoke:
    def test_3v3_reaches_win_threshold(self, tmp_path):
        t0 = time.monotonic()
        jobs = [{"kind": "smoke", "seed": s, "total_steps": X.SMOKE_STEP_BUDGET,
                 "threshold": X.SMOKE_WIN_RATE,
                 "out_dir": str(tmp_path / f"smoke{s}")} for s in range(5)]
        results = X.run_jobs(jobs, workers=2)
        med_best = X.median([r["best_win_rate"] for r in results])
        elapsed = (time.monotonic() - t0) / 60
        ok = med_best >= X.SMOKE_WIN_RATE
        rep.record("learning-smoke", ok,
                   f"median best win rate {med_best:.2f} over 5 seeds "
                   f"(budget {X.SMOKE_STEP_BUDGET}, {elapsed:.0f} min)")
        assert ok, [r["best_win_rate"] for r in results]


class TestCurriculumTransferOrdering:
    def test_orderings_against_scratch(self, tmp_path):
        t0 = time.monotonic()
        jobs = []
        for kind in ("scratch6", "curriculum", "transfer"):
            for s in range(5):
                jobs.append({"kind": kind, "seed": s,
                             "total_steps": X.CURRICULUM_STEP_BUDGET,
                             "threshold": X.CURRICULUM_WIN_RATE,
                             "pretrain_steps": 60_000,
                             "out_dir": str(tmp_path / f"{kind}{s}")})
        results = X.run_jobs(jobs, workers=2)
        by_kind = {}
        for r in results:
            by_kind.setdefault(r["kind"], []).append(r)
        med = {k: X.median(X.censored(rs, X.CURRICULUM_STEP_BUDGET))
               for k, rs in by_kind.items()}
        elapsed = (time.monotonic() - t0) / 60
        ok = med["curriculum"] <= med["scratch6"] and \
            med["transfer"] <= med["scratch6"]
        rep.record("curriculum-transfer-ordering", ok,
                   f"median steps to {X.CURRICULUM_WIN_RATE}: scratch "
                   f"{med['scratch6']:.0f}, curriculum {med['curriculum']:.0f}, "
                   f"transfer {med['transfer']:.0f} ({elapsed:.0f} min)")
        assert med["curriculum"] <= med["scratch6"]
        assert med["transfer"] <= med["scratch6"]
