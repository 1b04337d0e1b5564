import copy

import numpy as np
import pytest

from _oracles import finite_difference_grad
from spectra import agent as A
from spectra import autodiff as ad
from spectra import checkpoint as ckpt
from spectra import env as E
from spectra import mixer as M
from spectra import trainer as T


def tiny_env_cfg(m=2, e=2, max_steps=8, seed=3):
    return E.EnvConfig(m=m, e=e, max_steps=max_steps, seed=seed)


def tiny_train_cfg(**kw):
    defaults = dict(
        stages=[T.TrainStage(tiny_env_cfg(), 1.0)],
        total_steps=120, agent_kind="spectra", mixer_kind="vdn",
        batch_size=4, buffer_capacity=32, min_buffer=4, train_every=1,
        target_interval=5, d_h=8, n_h=2, mix_embed=8, mix_heads=2, seed=0,
    )
    defaults.update(kw)
    return T.TrainConfig(**defaults)


def make_nets(cfg):
    return T.build_networks(cfg)


def td_oracle(episodes, agent_params, target_agent, gamma):
    """Slow independent TD computation: per-agent single-obs forwards, VDN sum."""
    total, count = 0.0, 0
    tde = []
    for ep in episodes:
        m = ep.own.shape[1]
        obs_seq = _rebuild_observations(ep)
        h_on = [np.zeros(agent_params.d_h) for _ in range(m)]
        h_tg = [np.zeros(agent_params.d_h) for _ in range(m)]
        q_on, q_tg = [], []
        for t in range(ep.length + 1):
            row_on, row_tg = [], []
            for i in range(m):
                qv, h = A.agent_forward(agent_params, obs_seq[t][i], h_on[i],
                                        avail=ep.avail[t, i])
                h_on[i] = h.value[0]
                row_on.append(qv)
                qv_t, h_t = A.agent_forward(target_agent, obs_seq[t][i], h_tg[i],
                                            avail=ep.avail[t, i])
                h_tg[i] = h_t.value[0]
                row_tg.append(qv_t)
            q_on.append(row_on)
            q_tg.append(row_tg)
        ep_tde = []
        for t in range(ep.length):
            chosen = 0.0
            for i in range(m):
                flat = np.concatenate([q_on[t][i].own_values, q_on[t][i].target_values])
                chosen += flat[ep.actions[t, i]]
            target = 0.0
            for i in range(m):
                flat_on = np.concatenate([q_on[t + 1][i].own_values,
                                          q_on[t + 1][i].target_values])
                flat_tg = np.concatenate([q_tg[t + 1][i].own_values,
                                          q_tg[t + 1][i].target_values])
                target += flat_tg[np.argmax(flat_on)]
            done = 1.0 if t == ep.length - 1 else 0.0
            y = ep.rewards[t] + gamma * (1.0 - done) * target
            total += (chosen - y) ** 2
            ep_tde.append(chosen - y)
            count += 1
        tde.append(ep_tde)
    return total / count, tde


def _rebuild_observations(ep):
    out = []
    for t in range(ep.own.shape[0]):
        row = []
        for i in range(ep.own.shape[1]):
            allies = tuple(
                A.EntityObs(int(ep.ally_ids[t, i, j]), ep.allies[t, i, j],
                            bool(ep.ally_mask[t, i, j]))
                for j in range(ep.allies.shape[2]))
            enemies = tuple(
                A.EntityObs(int(ep.enemy_ids[t, i, j]), ep.enemies[t, i, j],
                            bool(ep.enemy_mask[t, i, j]))
                for j in range(ep.enemies.shape[2]))
            row.append(A.ObservationSet(own_id=i, own=ep.own[t, i],
                                        allies=allies, enemies=enemies))
        out.append(row)
    return out


def collect_episodes(n, cfg=None, eps=0.3, seed=5):
    cfg = cfg or tiny_train_cfg()
    agent_params, mixer_params = make_nets(cfg)
    env = E.MicroBattleEnv(cfg.stages[0].env_cfg)
    rng = np.random.default_rng(seed)
    return [T.rollout(env, agent_params, eps, rng, episode_seed=k)
            for k in range(n)], agent_params, mixer_params


class TestRollout:
    def test_greedy_rollout_matches_single_path_actions(self):
        cfg = tiny_train_cfg()
        agent_params, _ = make_nets(cfg)
        env = E.MicroBattleEnv(cfg.stages[0].env_cfg)
        ep = T.rollout(env, agent_params, eps=0.0,
                       rng=np.random.default_rng(0), episode_seed=2)

        env2 = E.MicroBattleEnv(cfg.stages[0].env_cfg)
        res = env2.reset(2)
        m = env2.cfg.m
        hs = [np.zeros(cfg.d_h) for _ in range(m)]
        for t in range(ep.length):
            for i in range(m):
                qv, h = A.agent_forward(agent_params, res.observations[i], hs[i],
                                        avail=res.avail[i])
                hs[i] = h.value[0]
                choice = A.greedy_action(qv)
                assert choice == T.decode_action(int(ep.actions[t, i]),
                                                 env2._slot_ids(i))
            res = env2.step([T.decode_action(int(ep.actions[t, i]), env2._slot_ids(i))
                             for i in range(m)])

    def test_episode_return_is_reward_sum(self):
        eps, _, _ = collect_episodes(3)
        for ep in eps:
            assert ep.episode_return == pytest.approx(ep.rewards[:ep.length].sum())

    def test_uniform_exploration_chi_squared(self):
        from scipy import stats
        mask = np.array([True, True, False, True, True, False, True])
        q = np.where(mask, np.linspace(1, 2, 7), -np.inf)
        rng = np.random.default_rng(11)
        counts = np.zeros(7)
        for _ in range(10_000):
            counts[T._flat_epsilon_greedy(q, mask, 1.0, rng)] += 1
        assert stats.chisquare(counts[mask]).pvalue > 0.01
        assert counts[~mask].sum() == 0


class TestReplayBuffer:
    def test_fifo_capacity(self):
        buf = T.ReplayBuffer(capacity=3)
        eps, _, _ = collect_episodes(5)
        for ep in eps:
            buf.add(ep)
        assert len(buf) == 3
        assert buf.episodes[0] is eps[2]

    def test_uniform_sampling(self):
        from scipy import stats
        buf = T.ReplayBuffer(capacity=8)
        eps, _, _ = collect_episodes(8)
        for ep in eps:
            buf.add(ep)
        rng = np.random.default_rng(0)
        counts = {id(ep): 0 for ep in eps}
        for _ in range(4000):
            for ep in buf.sample(2, rng):
                counts[id(ep)] += 1
        assert stats.chisquare(np.array(list(counts.values()))).pvalue > 0.01

    def test_sample_too_many(self):
        buf = T.ReplayBuffer(capacity=4)
        with pytest.raises(ValueError):
            buf.sample(1, np.random.default_rng(0))


class TestTdLoss:
    def test_matches_independent_oracle(self):
        episodes, agent_params, mixer_params = collect_episodes(3)
        target_agent = copy.deepcopy(agent_params)
        loss, info = T.td_loss(episodes, agent_params, "vdn", None,
                               target_agent, None, gamma=0.99)
        want, tde = td_oracle(episodes, agent_params, target_agent, gamma=0.99)
        assert loss.value == pytest.approx(want, rel=1e-10)
        for b, ep_tde in enumerate(tde):
            np.testing.assert_allclose(info["td_errors"][b, :len(ep_tde)], ep_tde,
                                       atol=1e-10)

    def test_gamma_zero_targets_are_rewards(self):
        episodes, agent_params, _ = collect_episodes(2)
        target_agent = copy.deepcopy(agent_params)
        loss, _ = T.td_loss(episodes, agent_params, "vdn", None,
                            target_agent, None, gamma=0.0)
        want, _ = td_oracle(episodes, agent_params, target_agent, gamma=0.0)
        assert loss.value == pytest.approx(want, rel=1e-10)

    def test_matched_terminal_value_contributes_zero(self):
        episodes, agent_params, _ = collect_episodes(1)
        ep = episodes[0]
        target_agent = copy.deepcopy(agent_params)
        _, info = T.td_loss([ep], agent_params, "vdn", None, target_agent, None, 0.99)
        tde_last = info["td_errors"][0, ep.length - 1]
        # force the terminal reward to equal the chosen joint value: error -> 0
        ep.rewards[ep.length - 1] += tde_last
        _, info2 = T.td_loss([ep], agent_params, "vdn", None, target_agent, None, 0.99)
        assert abs(info2["td_errors"][0, ep.length - 1]) < 1e-9

    def test_padded_steps_contribute_zero(self):
        episodes, agent_params, mixer_params = collect_episodes(4)
        lengths = {ep.length for ep in episodes}
        target_agent = copy.deepcopy(agent_params)
        _, info = T.td_loss(episodes, agent_params, "vdn", None,
                            target_agent, None, 0.99)
        for b, ep in enumerate(episodes):
            np.testing.assert_array_equal(info["td_errors"][b, ep.length:], 0.0)
        assert info["n_steps"] == sum(ep.length for ep in episodes)

    def test_loss_nonnegative(self):
        episodes, agent_params, _ = collect_episodes(3)
        target_agent = copy.deepcopy(agent_params)
        loss, _ = T.td_loss(episodes, agent_params, "vdn", None,
                            target_agent, None, 0.99)
        assert loss.value >= 0.0

    def test_empty_batch_rejected(self):
        _, agent_params, _ = collect_episodes(1)
        with pytest.raises(ValueError):
            T.td_loss([], agent_params, "vdn", None, agent_params, None, 0.99)

    def test_end_to_end_gradient_vs_finite_differences(self):
        episodes, agent_params, mixer_params = collect_episodes(2)
        cfg = tiny_train_cfg(mixer_kind="spectra")
        agent_params, mixer_params = make_nets(cfg)
        # env state features are nonnegative; force positive layer-1 biases so
        # the mixing relus are live and the check cannot pass vacuously
        for k in range(mixer_params.hyper1.n_h):
            mixer_params.hyper1.b_key[k].value[:] = np.abs(
                mixer_params.hyper1.b_key[k].value)
            mixer_params.hyper1.b_seed[k].value[:] = np.abs(
                mixer_params.hyper1.b_seed[k].value) + 0.5
        target_agent = copy.deepcopy(agent_params)
        target_mixer = copy.deepcopy(mixer_params)

        loss, _ = T.td_loss(episodes, agent_params, "spectra", mixer_params,
                            target_agent, target_mixer, 0.99)
        loss.backward()

        # one agent parameter and one mixer parameter, random entries
        checks = [
            ("agent", agent_params.w_act_q[0]),
            ("mixer", mixer_params.hyper1.w_key[0]),
            ("agent", agent_params.gru.w_in),
        ]
        for label, tensor in checks:
            base = tensor.value.copy()
            flat_idx = 3 % tensor.value.size
            h = 1e-6

            def f(v):
                tensor.value.reshape(-1)[flat_idx] = v
                with ad.no_grad():
                    out, _ = T.td_loss(episodes, agent_params, "spectra",
                                       mixer_params, target_agent, target_mixer, 0.99)
                return float(out.value)

            v0 = base.reshape(-1)[flat_idx]
            fd = (f(v0 + h) - f(v0 - h)) / (2 * h)
            tensor.value[...] = base
            got = tensor.grad.reshape(-1)[flat_idx]
            assert abs(fd) > 1e-10, f"{label}: vacuous probe point"
            assert abs(got - fd) / abs(fd) < 1e-3, label

    def test_vdn_gradient_linearity_contract(self):
        # d loss / d q_i must be exactly 2 * tde / n_steps under the vdn mixer
        rng = np.random.default_rng(0)
        b, m, steps = 3, 2, 4
        y = rng.standard_normal((b, steps))
        pad = np.ones((b, steps))
        pad[2, 3] = 0.0
        q = ad.parameter(rng.standard_normal((b, m, steps)))
        acc = None
        for t in range(steps):
            qt = ad.reshape(ad.gather(
                ad.reshape(q, (b * m, steps)), np.full(b * m, t)), (b, m))
            joint = M.vdn_mix_batch(qt)
            diff = ad.sub(joint, ad.tensor(y[:, t]))
            term = ad.sum_all(ad.mul(ad.mul(diff, diff), ad.tensor(pad[:, t])))
            acc = term if acc is None else ad.add(acc, term)
        n = pad.sum()
        loss = ad.scale(acc, 1.0 / n)
        loss.backward()
        joint_vals = q.value.sum(axis=1)
        tde = (joint_vals - y) * pad
        for i in range(m):
            np.testing.assert_allclose(q.grad[:, i, :], 2.0 * tde / n, atol=1e-12)


class TestOptimizerAndTargets:
    def test_target_changes_only_at_sync(self):
        episodes, agent_params, _ = collect_episodes(4)
        target_agent = copy.deepcopy(agent_params)
        snapshot = {n: p.value.copy() for n, p in target_agent.named_parameters()}
        opt = T.Adam(agent_params.named_parameters(), lr=1e-3)
        for _ in range(3):
            opt.zero_grad()
            loss, _ = T.td_loss(episodes, agent_params, "vdn", None,
                                target_agent, None, 0.99)
            loss.backward()
            opt.step()
        for n, p in target_agent.named_parameters():
            np.testing.assert_array_equal(p.value, snapshot[n])
        online = dict(agent_params.named_parameters())
        assert any(not np.array_equal(online[n].value, snapshot[n]) for n in snapshot)
        T.sync_params(agent_params, target_agent)
        for n, p in target_agent.named_parameters():
            np.testing.assert_array_equal(p.value, online[n].value)

    def test_gradient_clip(self):
        p = ad.parameter(np.zeros(4))
        opt = T.Adam([("p", p)], lr=1.0, clip_norm=1.0)
        p.grad = np.full(4, 100.0)
        norm = opt.step()
        assert norm == pytest.approx(200.0)
        # post-clip first Adam step is lr-scaled unit direction regardless of norm
        assert np.all(np.abs(p.value) < 1.001)


class TestTrainLoop:
    def test_zero_steps_writes_header_and_checkpoint(self, tmp_path):
        cfg = tiny_train_cfg(total_steps=0)
        art = T.train(cfg, tmp_path / "run")
        lines = open(art.metrics_path).read().strip().split("\n")
        assert lines == [",".join(T.METRICS_HEADER)]
        assert (tmp_path / "run" / "checkpoint_final.spck").exists()

    def test_deterministic_metrics_reproduce_byte_identically(self, tmp_path):
        cfg = tiny_train_cfg(total_steps=120)
        a1 = T.train(cfg, tmp_path / "r1")
        a2 = T.train(cfg, tmp_path / "r2")
        b1 = open(a1.metrics_path, "rb").read()
        b2 = open(a2.metrics_path, "rb").read()
        assert b1 == b2
        assert a1.param_hash == a2.param_hash

    def test_nan_loss_aborts_with_dump(self, tmp_path, monkeypatch):
        cfg = tiny_train_cfg(total_steps=200)
        monkeypatch.setattr(T, "td_loss", lambda *a, **k: (ad.tensor(np.nan), {}))
        with pytest.raises(RuntimeError, match="non-finite loss"):
            T.train(cfg, tmp_path / "boom")
        assert (tmp_path / "boom" / "nan_diagnostics.spck").exists()

    def test_qmix_curriculum_rejected_on_size_change(self):
        stages = [T.TrainStage(tiny_env_cfg(m=2, e=2), 0.5),
                  T.TrainStage(tiny_env_cfg(m=3, e=3), 0.5)]
        cfg = tiny_train_cfg(stages=stages, mixer_kind="qmix")
        with pytest.raises(ValueError, match="non-scalable mixer"):
            cfg.validate()

    def test_curriculum_keeps_parameter_manifest(self, tmp_path):
        stages = [T.TrainStage(tiny_env_cfg(m=2, e=2, max_steps=6), 0.5),
                  T.TrainStage(tiny_env_cfg(m=3, e=3, max_steps=6), 0.5)]
        cfg = tiny_train_cfg(stages=stages, total_steps=100, min_buffer=2,
                             batch_size=2)
        art = T.train(cfg, tmp_path / "curr")
        sig = ckpt.manifest_signature(art.checkpoint_path)
        cfg_single = tiny_train_cfg(total_steps=0)
        art_single = T.train(cfg_single, tmp_path / "single")
        assert sig == ckpt.manifest_signature(art_single.checkpoint_path)


class TestTransfer:
    def test_save_load_roundtrip_bitexact_forward(self, tmp_path):
        cfg = tiny_train_cfg(total_steps=60, mixer_kind="spectra")
        art = T.train(cfg, tmp_path / "run")
        agent_params, mixer_kind, mixer_params, meta = T.transfer_load(
            art.checkpoint_path, tiny_env_cfg())
        orig_agent, orig_mixer = None, None

        env = E.MicroBattleEnv(tiny_env_cfg())
        res = env.reset(0)
        q1, _ = A.agent_forward(agent_params, res.observations[0],
                                np.zeros(cfg.d_h), avail=res.avail[0])
        again, _, again_mixer, _ = T.transfer_load(art.checkpoint_path, tiny_env_cfg())
        q2, _ = A.agent_forward(again, res.observations[0],
                                np.zeros(cfg.d_h), avail=res.avail[0])
        np.testing.assert_array_equal(q1.own_values, q2.own_values)
        np.testing.assert_array_equal(q1.target_values, q2.target_values)

    def test_zero_shot_larger_team(self, tmp_path):
        cfg = tiny_train_cfg(total_steps=60)
        art = T.train(cfg, tmp_path / "run")
        big = tiny_env_cfg(m=4, e=4, max_steps=6)
        agent_params, mixer_kind, mixer_params, _ = T.transfer_load(
            art.checkpoint_path, big)
        report = T.evaluate(big, agent_params, episodes=2)
        assert 0.0 <= report["win_rate"] <= 1.0

    def test_manifest_mismatch_lists_names(self, tmp_path):
        cfg = tiny_train_cfg(total_steps=0)
        art = T.train(cfg, tmp_path / "run")
        header, arrays = ckpt.load_manifest(art.checkpoint_path)
        del arrays["agent/w_own_q"]
        arrays["agent/bogus"] = np.zeros(3)
        agent_params, _ = make_nets(cfg)
        with pytest.raises(ValueError) as err:
            ckpt.restore(agent_params.named_parameters(), arrays)
        assert "agent/bogus" in str(err.value)
        assert "agent/w_own_q" in str(err.value)

    def test_qmix_checkpoint_rejects_new_team_size(self, tmp_path):
        cfg = tiny_train_cfg(total_steps=0, mixer_kind="qmix")
        art = T.train(cfg, tmp_path / "run")
        with pytest.raises(ValueError, match="non-scalable"):
            T.transfer_load(art.checkpoint_path, tiny_env_cfg(m=5, e=5))
