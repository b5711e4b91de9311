import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artreplay.cmab import (DEFAULT_LEVELS, SURFACES, AdaptiveDiscretization, Alloc, CMABEnv,
                            FixedDiscretization, Partition, bonus_adaptive, bonus_fixed, check_feasible,
                            classify_cmab, cmab_opt, cmab_opt_action, exhaustive_select, export_snapshot,
                            fixed_discretization_init, reward_pwl, reward_quadratic, select_regions,
                            selection_value)
from artreplay.history import SpatialHistory
from artreplay.meta import run_policy, verify_coupling
from artreplay.model import ConfigError, InvariantViolation, ValidationError
from artreplay.rng import stream

PWL, QUAD = SURFACES["pwl"], SURFACES["quadratic"]


def brute_knapsack(ucb, levels, n_max, budget):
    """Independent oracle: try every row -> {unused, level} assignment."""
    m, nl = ucb.shape
    best = 0.0
    for assign in itertools.product(range(-1, nl), repeat=m):
        picked = [(r, c) for r, c in enumerate(assign) if c >= 0]
        if len(picked) > n_max or sum(levels[c] for _, c in picked) > budget + 1e-12:
            continue
        best = max(best, sum(ucb[r, c] for r, c in picked))
    return best


def naive_opt(fn, n_max, budget, levels, eps, steps):
    """Independent oracle: enumerate point subsets of the grid and level assignments."""
    g = [i / steps for i in range(steps + 1)]
    pts = [(x, y) for x in g for y in g]
    best = 0.0
    for m in range(1, n_max + 1):
        for combo in itertools.combinations(pts, m):
            if any(max(abs(a[0] - b[0]), abs(a[1] - b[1])) < eps - 1e-12
                   for a, b in itertools.combinations(combo, 2)):
                continue
            for betas in itertools.product(levels, repeat=m):
                if sum(betas) <= budget + 1e-12:
                    best = max(best, sum(float(fn(p, b)) for p, b in zip(combo, betas)))
    return best


def spatial_history(surface, H, seed, levels=DEFAULT_LEVELS):
    rng = stream(seed, "test-spatial")
    p = rng.random((H, 2))
    b = np.asarray(levels)[rng.integers(len(levels), size=H)]
    r = (rng.random(H) < surface((p[:, 0], p[:, 1]), b)).astype(float)
    return SpatialHistory(p[:, 0], p[:, 1], b, r)


class TestSurfaces:
    def test_pwl(self):
        assert reward_pwl((1, 1), 1) == 1
        assert reward_pwl((0, 0), 0.7) == 0
        assert reward_pwl((0.4, 0.8), 0.5) == pytest.approx(0.3)

    def test_quadratic(self):
        assert reward_quadratic((0.5, 0.5), 1) == 1
        assert reward_quadratic((0.5, 0.5), 0) == 0
        assert reward_quadratic((0, 0), 1) == pytest.approx(0.5)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.sampled_from(DEFAULT_LEVELS))
    def test_range_and_lipschitz(self, x1, y1, x2, y2, beta):
        d = max(abs(x1 - x2), abs(y1 - y2))
        for s in (PWL, QUAD):
            a, b = s.mean((x1, y1), beta), s.mean((x2, y2), beta)
            assert 0 <= a <= 1
            assert abs(a - b) <= s.lipschitz * d + 1e-12


class TestBonuses:
    def test_fixed_value(self):
        assert bonus_fixed(8, 1000, 0.1) == pytest.approx(3.034854258770293, abs=1e-12)
        assert bonus_fixed(8, 1000, 0.1) == pytest.approx(3.035, abs=5e-4)

    def test_adaptive_value(self):
        assert bonus_adaptive(100, 1000, 0.1, 1, 1) == pytest.approx(1.058386410515739, abs=1e-12)
        assert bonus_adaptive(100, 1000, 0.1, 0, 1) == bonus_fixed(100, 1000, 0.1)

    def test_limits_and_scaling(self):
        assert bonus_fixed(10 ** 8, 1000, 0.1) < 1e-3
        assert bonus_fixed(0, 1000, 0.1) == math.inf
        assert bonus_fixed(20, 1000, 0.1) == pytest.approx(bonus_fixed(10, 1000, 0.1) / math.sqrt(2))
        assert bonus_adaptive(40, 1000, 0.1) == pytest.approx(bonus_adaptive(10, 1000, 0.1) / 2)


class TestSelection:
    def test_two_candidates(self):
        ucb = np.array([[0.0, 0.4, 0.0], [0.0, 0.0, 0.9]])
        assert select_regions(ucb, DEFAULT_LEVELS, 1, 1.0) == [(1, 2)]

    def test_ratio_beats_raw_value(self):
        ucb = np.array([[0.0, 0.4, 0.5]])
        # 0.4/0.5 = 0.8 > 0.5/1
        assert select_regions(ucb, DEFAULT_LEVELS, 1, 1.0) == [(0, 1)]

    def test_all_zero(self):
        ucb = np.zeros((4, 3))
        picked = select_regions(ucb, DEFAULT_LEVELS, 3, 1.0)
        assert [r for r, _ in picked] == [0, 1, 2]
        assert selection_value(ucb, picked) == 0 == brute_knapsack(ucb, np.array(DEFAULT_LEVELS), 3, 1.0)

    def test_empty(self):
        assert select_regions(np.ones((3, 3)), DEFAULT_LEVELS, 0, 2.0) == []

    def test_zero_cost_uses_slot_not_budget(self):
        ucb = np.array([[0.0, 0.0, 1.0], [0.3, 0.1, 0.2]])
        picked = select_regions(ucb, DEFAULT_LEVELS, 2, 1.0)
        assert picked == [(0, 2), (1, 0)]

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 4), st.integers(0, 4), st.floats(0, 3), st.integers(0, 2 ** 31))
    def test_feasible_and_exhaustive_agrees(self, m, n_max, budget, seed):
        rng = stream(seed, "sel")
        ucb = rng.random((m, 3))
        lv = np.array(DEFAULT_LEVELS)
        picked = select_regions(ucb, lv, n_max, budget)
        rows = [r for r, _ in picked]
        assert len(set(rows)) == len(rows) <= n_max
        assert sum(lv[c] for _, c in picked) <= budget + 1e-12
        assert exhaustive_select(ucb, lv, n_max, budget)[0] == pytest.approx(brute_knapsack(ucb, lv, n_max, budget))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.floats(0, 3), st.integers(0, 2 ** 31))
    def test_linear_in_beta_is_optimal(self, m, n_max, budget, seed):
        c = stream(seed, "lin").random(m)
        lv = np.array(DEFAULT_LEVELS)
        ucb = np.outer(c, lv)
        got = selection_value(ucb, select_regions(ucb, lv, n_max, budget))
        assert got == pytest.approx(brute_knapsack(ucb, lv, n_max, budget), abs=1e-12)


class TestRegions:
    def test_update_first_reward(self):
        alg = AdaptiveDiscretization(1000)
        alg.update_region(0, 2, 1.0)
        assert alg.partition.ucb[0, 2] == 1.0 or alg.partition.leaf_count == 4

    def test_update_candidate(self):
        alg = AdaptiveDiscretization(1000, eps=0.6)  # root cannot split: r = 1 < 2 eps
        part = alg.partition
        part.n[0, 1], part.mean[0, 1] = 399, 0.2
        alg.update_region(0, 1, 0.2)
        assert part.n[0, 1] == 400
        assert part.ucb[0, 1] == pytest.approx(0.7291932052578695, abs=1e-12)

    def test_locality(self):
        alg = FixedDiscretization(100, gamma=0.5, eps=0.2)
        part = alg.partition
        before = (part.n.copy(), part.mean.copy(), part.ucb.copy())
        node = part.leaves()[2]
        alg.update_region(node, 1, 0.0)
        mask = np.ones(len(part.cells), dtype=bool)
        mask[node] = False
        for a, b in zip(before, (part.n, part.mean, part.ucb)):
            assert a[: len(mask)][mask].tobytes() == b[: len(mask)][mask].tobytes()
            assert np.array_equal(a[node, [0, 2]], b[node, [0, 2]])

    def test_bad_reward(self):
        with pytest.raises(ValidationError):
            AdaptiveDiscretization(10).update_region(0, 0, -0.1)

    def test_split_threshold(self):
        # r = 1/4 needs n >= 16 and eps <= 1/8
        for eps, n_needed in ((0.125, 16), (0.13, None)):
            alg = AdaptiveDiscretization(1000, eps=eps, depth=2)
            node = alg.partition.leaves()[0]
            for i in range(1, 17):
                split = alg.partition.leaf_of_cell.get(alg.partition.cells[node]) != node
                assert not split
                alg.update_region(node, 2, 1.0)
            split = alg.partition.leaf_of_cell.get(alg.partition.cells[node]) != node
            assert split == (n_needed is not None)

    def test_radius_guard(self):
        alg = AdaptiveDiscretization(1000, eps=1 / 6, depth=2)  # r = 1/4 = 1.5 eps
        node = alg.partition.leaves()[5]
        for _ in range(500):
            alg.update_region(node, 1, 0.5)
        assert alg.partition.leaf_count == 16

    def test_split_inheritance(self):
        part = Partition(DEFAULT_LEVELS)
        part.n[0], part.mean[0], part.ucb[0] = (3, 4, 5), (0.1, 0.2, 0.3), (0.9, 0.8, 0.7)
        kids = part.split(0)
        assert sum(4.0 ** -part.cells[k][0] for k in kids) == 1.0
        for k in kids:
            assert part.ucb[k].tolist() == [0.9, 0.8, 0.7]
            assert part.n[k].tolist() == [3, 4, 5]
        part.check_cover()
        with pytest.raises(InvariantViolation):
            part.split(0)

    def test_fixed_grid(self):
        assert fixed_discretization_init(1).leaf_count == 1
        assert fixed_discretization_init(0.25).leaf_count == 16
        assert fixed_discretization_init(1 / 8).region_count() == 192
        with pytest.raises(ConfigError):
            fixed_discretization_init(0.3)
        with pytest.raises(ConfigError):
            FixedDiscretization(100, gamma=0.125, eps=0.2)

    def test_classify(self):
        part = fixed_discretization_init(0.5)
        assert classify_cmab(((0.1, 0.9), 0.5), part) == classify_cmab(((0.4, 0.6), 0.5), part)
        assert classify_cmab(((0.1, 0.9), 0.5), part) != classify_cmab(((0.1, 0.9), 1.0), part)
        assert classify_cmab(((0.5, 0.5), 1.0), part)[1] == (1, 1, 1)

    def test_history_remaps_after_split(self):
        part = Partition(DEFAULT_LEVELS)
        h = SpatialHistory([0.1, 0.8], [0.1, 0.8], [0.5, 0.5], [1, 1])
        before = classify_cmab(((0.1, 0.1), 0.5), part)
        part.split(0)
        after = classify_cmab(((0.1, 0.1), 0.5), part)
        assert before[1] == (0, 0, 0) and after[1] == (1, 0, 0)
        assert h.count_unused(after) == 1

    def test_max_depth_touching(self):
        part = Partition(DEFAULT_LEVELS)
        part.split(0)
        part.split(part.leaf_for_point((0.1, 0.1)))
        assert part.depth_at((0.5, 0.5)) == 1
        assert part.max_depth_touching((0.5, 0.5)) == 2
        assert part.max_depth_touching((1.0, 1.0)) == 1

    def test_snapshot_export(self, tmp_path):
        alg = FixedDiscretization(10, gamma=0.5)
        export_snapshot(alg.partition, tmp_path / "snap.csv")
        lines = (tmp_path / "snap.csv").read_text().splitlines()
        assert lines[0] == "beta,x0,x1,y0,y1,n,mean,ucb,depth"
        assert len(lines) == 1 + 4 * 3


class TestOpt:
    def test_single_component(self):
        assert cmab_opt(QUAD, 1, 1) == 1.0
        assert cmab_opt(PWL, 1, 1) == 1.0
        val, action = cmab_opt_action(QUAD, 1, 1)
        assert action == (Alloc((0.5, 0.5), 1.0),)
        assert cmab_opt_action(PWL, 1, 1)[1] == (Alloc((1.0, 1.0), 1.0),)

    def test_fixture(self):
        # two full allocations: (1, 1) and the best grid point 0.2 away, (51/64, 1)
        assert cmab_opt(PWL, 5, 2, DEFAULT_LEVELS, 0.2, 1 / 64) == 1.8984375

    @pytest.mark.parametrize("fn,surface", [(reward_pwl, PWL), (reward_quadratic, QUAD)])
    @pytest.mark.parametrize("n_max,budget,eps", [(1, 1, 0.2), (2, 1, 0.2), (3, 2, 0.3), (3, 1.5, 0.5), (2, 2, 1.0)])
    def test_against_naive_grid(self, fn, surface, n_max, budget, eps):
        got = cmab_opt(surface, n_max, budget, DEFAULT_LEVELS, eps, 1 / 4)
        assert got == pytest.approx(naive_opt(fn, n_max, budget, DEFAULT_LEVELS, eps, 4), abs=1e-12)

    def test_optimal_action_is_feasible(self):
        val, action = cmab_opt_action(QUAD, 5, 2, DEFAULT_LEVELS, 0.2)
        check_feasible(action, 5, 2, DEFAULT_LEVELS, 0.2)
        assert sum(QUAD.mean(a.point, a.beta) for a in action) == pytest.approx(val)


class TestFeasibility:
    def test_violations(self):
        a = (Alloc((0.1, 0.1), 1.0), Alloc((0.15, 0.5), 1.0))
        check_feasible(a, 5, 2, DEFAULT_LEVELS, 0.2)
        with pytest.raises(InvariantViolation):
            check_feasible(a, 5, 1.5, DEFAULT_LEVELS, 0.2)
        with pytest.raises(InvariantViolation):
            check_feasible(a, 1, 2, DEFAULT_LEVELS, 0.2)
        with pytest.raises(InvariantViolation):
            check_feasible((Alloc((0.1, 0.1), 0.5), Alloc((0.2, 0.2), 0.5)), 5, 2, DEFAULT_LEVELS, 0.2)

    def test_random_baseline_is_feasible(self):
        env = CMABEnv(PWL, 5, 2, DEFAULT_LEVELS, 0.2, seed=1)
        rng = stream(1, "random")
        for _ in range(200):
            env.check_action(env.random_action(rng))

    @pytest.mark.parametrize("cls,kw", [(FixedDiscretization, {"gamma": 0.25}), (AdaptiveDiscretization, {"eps": 0.05})])
    def test_runs_stay_feasible_and_covered(self, cls, kw):
        eps = kw.get("eps", 0.2)
        env = CMABEnv(QUAD, 5, 2, DEFAULT_LEVELS, eps, seed=4)
        alg = cls(400, **kw)
        run_policy(alg, env, 400, "full-start", spatial_history(QUAD, 2000, 4))  # checks every action
        alg.partition.check_cover()


class TestDiscretizationProperties:
    @pytest.mark.parametrize("seed", range(3))
    def test_monotone_ucb_through_splits(self, seed):
        alg = AdaptiveDiscretization(1000, eps=0.05)
        env = CMABEnv(QUAD, 5, 2, DEFAULT_LEVELS, 0.05, seed=seed)
        probes = stream(seed, "probe").random((40, 2))
        last = np.ones((40, 3))
        reader = env.stack.reader()
        h = spatial_history(QUAD, 3000, seed)
        for _, entry in h.drain():
            alg.ingest(entry)
        for _ in range(300):
            action = alg.decide()
            for c in action:
                alg.observe(c, reader.draw(env.reward_class(c)))
            part = alg.partition
            now = np.array([part.ucb[part.leaf_for_point(p)] for p in probes])
            assert np.all(now <= last)
            last = now

    def test_split_soundness(self):
        alg = AdaptiveDiscretization(1000, eps=0.05)
        for _, e in spatial_history(QUAD, 5000, 9).drain():
            alg.ingest(e)
        part = alg.partition
        for node, parent in enumerate(part.parent):
            if parent >= 0:
                d = part.cells[parent][0]
                assert part.n[parent].max() >= 4 ** d
                assert 2.0 ** -d >= 2 * 0.05

    @pytest.mark.parametrize("cls", [FixedDiscretization, AdaptiveDiscretization])
    @pytest.mark.parametrize("seed", range(20))
    def test_iidata_random_perturbation(self, cls, seed):
        rng = stream(seed, "disc-iidata")
        kw = {"gamma": 0.25} if cls is FixedDiscretization else {"eps": 0.05}
        alg = cls(1000, **kw)
        for _, e in spatial_history(QUAD, int(rng.integers(0, 3000)), seed).drain():
            alg.ingest(e)
        action = alg.decide()
        chosen = {alg.history_key(c) for c in action}
        extra = spatial_history(PWL, 400, seed + 1000)
        for j in range(len(extra)):
            p1, p2, beta, r = extra.entry(j)
            part = alg.partition
            key = classify_cmab(((p1, p2), beta), part, per_level=cls is FixedDiscretization)
            if key not in chosen:
                alg.ingest((p1, p2, beta, r))
        assert alg.decide() == action

    @pytest.mark.parametrize("cls,kw", [(FixedDiscretization, {"gamma": 0.25}), (AdaptiveDiscretization, {})])
    def test_coupling(self, cls, kw):
        for seed in range(3):
            env = CMABEnv(QUAD, 5, 2, DEFAULT_LEVELS, 0.2, seed=seed)
            rep = verify_coupling(lambda: cls(300, **kw), env, spatial_history(QUAD, 300, seed), 300)
            assert rep, rep.describe()

    def test_refinement_concentrates(self):
        deep_center, deep_corner = [], []
        for seed in range(60):
            env = CMABEnv(QUAD, 5, 2, DEFAULT_LEVELS, 0.2, seed=seed)
            alg = AdaptiveDiscretization(1000, eps=0.2)
            run_policy(alg, env, 1000, "ignorant")
            deep_center.append(alg.partition.max_depth_touching((0.5, 0.5)))
            deep_corner.append(alg.partition.max_depth_touching((0.0, 0.0)))
        assert np.median(deep_center) >= np.median(deep_corner)
