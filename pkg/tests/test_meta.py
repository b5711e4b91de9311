import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artreplay.algorithms import CombMonUCB, MonUCB, ThompsonSampling
from artreplay.history import HistoricalDataset
from artreplay.meta import (CombFiniteEnv, KArmedEnv, artificial_replay_step, full_start_init,
                            ignorant_step, run_policy, verify_coupling)
from artreplay.model import ConfigError, IngestionError, KArmedInstance, RewardStack
from artreplay.rng import stream


def k_env(means, seed=1):
    inst = KArmedInstance(tuple(means))
    return KArmedEnv(inst, RewardStack(seed, inst.mean))


def uniform_history(inst, H, seed):
    rng = stream(seed, "test-history")
    arms = rng.integers(inst.k, size=H)
    return HistoricalDataset([(int(a), float(rng.random() < inst.means[a])) for a in arms])


class CountParity:
    """Deterministic base that is not IIData: it plays (number of observations) mod K."""

    iidata = False

    def __init__(self, k):
        self.k, self.seen = k, 0

    def decide(self):
        return self.seen % self.k

    def components(self, a):
        return (a,)

    def history_key(self, c):
        return c

    def observe(self, c, r):
        self.seen += 1

    def ingest(self, entry):
        self.seen += 1


class TestIgnorant:
    def test_ignores_history(self):
        env = k_env((0.2, 0.8, 0.5))
        hist = uniform_history(env.instance, 200, 3)
        a = run_policy(MonUCB(3, 100), env, 100, "ignorant", hist)
        b = run_policy(MonUCB(3, 100), env, 100, "ignorant", None)
        assert a.actions == b.actions
        assert a.reads == 0 and hist.reads == 0

    def test_fresh_plays_arm_zero(self):
        env = k_env((0.2, 0.8))
        action, rewards = ignorant_step(MonUCB(2, 10), env, env.stack.reader())
        assert action == 0 and len(rewards) == 1


class TestFullStart:
    def test_empty_dataset(self):
        alg = MonUCB(3, 10)
        assert full_start_init(alg, HistoricalDataset([])) == 0
        assert alg.snapshot() == MonUCB(3, 10).snapshot()

    def test_locality(self):
        alg = MonUCB(2, 1000)
        assert full_start_init(alg, HistoricalDataset([(1, 0.0)] * 100)) == 100
        assert alg.mean[1] == 0.0 and alg.n[1] == 100
        assert (alg.n[0], alg.mean[0], alg.ucb[0]) == (0, 1.0, 1.0)

    def test_reads_counted(self):
        env = k_env((0.2, 0.8))
        hist = uniform_history(env.instance, 57, 1)
        tr = run_policy(MonUCB(2, 20), env, 20, "full-start", hist)
        assert tr.reads == 57 and tr.reads_before_first == 57

    def test_malformed_entry_reports_index(self):
        with pytest.raises(IngestionError) as exc:
            full_start_init(MonUCB(2, 10), HistoricalDataset([(0, 1.0), (1, 0.0), (5, 0.0)]))
        assert exc.value.index == 2


class TestArtificialReplay:
    def test_empty_matches_ignorant(self):
        env = k_env((0.3, 0.6, 0.5))
        a = run_policy(MonUCB(3, 200), env, 200, "artificial-replay", HistoricalDataset([]))
        b = run_policy(MonUCB(3, 200), env, 200, "ignorant")
        assert a.actions == b.actions

    def test_hand_trace(self):
        # T = 2: bonus(1) = sqrt(2 ln 2) > 1 keeps ucb(0) = 1; bonus(2) = sqrt(ln 2) drops it
        env = k_env((0.5, 0.5))
        alg = MonUCB(2, 2)
        hist = HistoricalDataset([(0, 0.0), (0, 0.0)])
        action, rewards, reads, proposals = artificial_replay_step(alg, env, env.stack.reader(), hist)
        assert reads == 2 and proposals == 3
        assert alg.ucb[0] == pytest.approx(math.sqrt(math.log(2)))
        assert action == 1
        assert alg.n[1] == 1

    def test_semi_bandit_match(self):
        inst = KArmedInstance((0.5, 0.5, 0.5))
        env = CombFiniteEnv(inst, 2, RewardStack(1, inst.mean))
        alg = CombMonUCB(3, 2, 100)
        hist = HistoricalDataset([(1, 0.0), (2, 1.0)])
        action, rewards, reads, proposals = artificial_replay_step(alg, env, env.stack.reader(), hist)
        assert reads == 1 and proposals == 2
        assert action == (0, 1) and len(rewards) == 2
        assert hist.unused(1) == 0 and hist.unused(2) == 1

    def test_invariants(self):
        env = k_env((0.1, 0.4, 0.45, 0.9))
        hist = uniform_history(env.instance, 500, 2)
        tr = run_policy(MonUCB(4, 300), env, 300, "artificial-replay", hist)
        assert tr.reads <= 500
        assert tr.reads_before_first <= tr.reads
        assert all(b >= a for a, b in zip(tr.ledger.reads, tr.ledger.reads[1:]))
        assert tr.ledger.t == 300
        assert tr.ledger.proposals <= 300 + tr.reads

    def test_one_online_sample_per_step(self):
        env = k_env((0.1, 0.9))
        hist = uniform_history(env.instance, 100, 2)
        alg = MonUCB(2, 50)
        reader = env.stack.reader()
        for _ in range(50):
            artificial_replay_step(alg, env, reader, hist)
        assert reader.total == 50

    def test_unknown_meta(self):
        with pytest.raises(ConfigError):
            run_policy(MonUCB(2, 5), k_env((0.1, 0.2)), 5, "warm")


class TestCoupling:
    def test_no_history(self):
        env = k_env((0.3, 0.7))
        assert verify_coupling(lambda: MonUCB(2, 50), env, HistoricalDataset([]), 50)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 8), st.integers(1, 300), st.integers(0, 600), st.integers(0, 10_000))
    def test_monucb_any_instance(self, k, T, H, seed):
        inst = KArmedInstance.random(k, seed)
        env = KArmedEnv(inst, RewardStack(seed, inst.mean))
        rep = verify_coupling(lambda: MonUCB(k, T), env, uniform_history(inst, H, seed), T)
        assert rep, rep.describe()
        assert rep.reads_fs == H and rep.reads_ar <= H

    def test_comb_monucb(self):
        for seed in range(5):
            inst = KArmedInstance.random(10, seed)
            env = CombFiniteEnv(inst, 3, RewardStack(seed, inst.mean))
            assert verify_coupling(lambda: CombMonUCB(10, 3, 300), env, uniform_history(inst, 500, seed), 300)

    def test_requires_iidata(self):
        env = k_env((0.3, 0.7))
        with pytest.raises(ConfigError):
            verify_coupling(lambda: ThompsonSampling(2, stream(1, "ts")), env, HistoricalDataset([]), 10)

    def test_divergence_report(self):
        env = k_env((0.3, 0.7, 0.5))
        hist = HistoricalDataset([(1, 1.0)])
        rep = verify_coupling(lambda: CountParity(3), env, hist, 10, require_iidata=False)
        assert not rep
        assert rep.t == 1 and rep.action_fs == 1 and rep.action_ar == 0
        assert "t=1" in rep.describe()

    def test_thompson_divergence_is_recorded(self):
        diverged = 0
        for seed in range(10):
            inst = KArmedInstance.random(5, seed)
            env = KArmedEnv(inst, RewardStack(seed, inst.mean))
            rep = verify_coupling(lambda: ThompsonSampling(5, stream(seed, "algorithm", "thompson")), env,
                                  uniform_history(inst, 200, seed), 200, require_iidata=False)
            diverged += not rep
        assert 0 <= diverged <= 10
        assert diverged > 0
