"""Scenario configuration, history generators, experiment runner and CSV validation."""

from __future__ import annotations

import csv
import math
import os
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from artreplay.algorithms import CombMonUCB, MonUCB, PsiSpec, ThompsonSampling
from artreplay.cmab import (DEFAULT_LEVELS, AdaptiveDiscretization, CMABEnv, FixedDiscretization,
                            get_surface)
from artreplay.history import HistoricalDataset, SpatialHistory
from artreplay.meta import METAS, CombFiniteEnv, KArmedEnv, RunTrace, run_policy, verify_coupling
from artreplay.model import ConfigError, InvariantViolation, KArmedInstance, RewardStack
from artreplay.rng import stream

DOMAINS = ("k-armed", "comb-finite", "cmab-pwl", "cmab-quadratic", "cmab-csv")
ALGORITHMS = ("monucb", "comb-monucb", "fixed-disc", "adaptive-disc", "thompson")
IIDATA_ALGORITHMS = ("monucb", "comb-monucb", "fixed-disc", "adaptive-disc")
COLUMNS = ["seed", "t", "regret", "reads", "unused_frac", "regions", "wall_ms"]
BAD_QUANTILE = 0.2

_DOMAIN_ALGS = {
    "k-armed": ("monucb", "thompson"),
    "comb-finite": ("comb-monucb",),
    "cmab-pwl": ("fixed-disc", "adaptive-disc"),
    "cmab-quadratic": ("fixed-disc", "adaptive-disc"),
    "cmab-csv": ("fixed-disc", "adaptive-disc"),
}



def _names(s: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in s.split(",") if v.strip())


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


@dataclass
class ScenarioConfig:
    """One experiment. Every field can be set from a ``key = value`` file.

    ``history_mode`` is ``uniform``, ``spurious-frac(f)`` or
    ``imbalanced-bad-arms(f)``. ``seed`` is the master seed; run ``i`` uses
    ``seed + i`` for ``i < seeds``.
    """

    domain: str = "k-armed"
    K: int = 10
    T: int = 1000
    H: int = 0
    seeds: int = 60
    seed: int = 1
    means: tuple[float, ...] = ()
    B: float = 2.0
    B_int: int = 3
    N: int = 5
    eps: float = 0.2
    levels: tuple[float, ...] = DEFAULT_LEVELS
    delta: float = 0.1
    gamma: float = 0.25
    L: float = 1.0
    d_max: float = 1.0
    log_term: str = "T"
    psi_transform: bool = False
    history_mode: str = "uniform"
    history_csv: str = ""
    surface: str = ""
    opt_resolution: float = 1 / 64
    algorithms: tuple[str, ...] = ("monucb",)
    metas: tuple[str, ...] = ("ignorant", "full-start", "artificial-replay")
    timing: bool = False
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.domain not in DOMAINS:
            raise ConfigError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        if self.seeds < 1:
            raise ConfigError("seeds must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.H < 0:
            raise ConfigError("H must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for a in self.algorithms:
            if a not in ALGORITHMS:
                raise ConfigError(f"unknown algorithm {a!r}; choose from {ALGORITHMS}")
            if a not in _DOMAIN_ALGS[self.domain]:
                raise ConfigError(f"algorithm {a!r} does not apply to domain {self.domain!r}")
        for m in self.metas:
            if m not in METAS:
                raise ConfigError(f"unknown meta {m!r}; choose from {METAS}")
        self.history_spec()
        if self.domain in ("k-armed", "comb-finite"):
            if self.means:
                if len(self.means) != self.K:
                    raise ConfigError(f"{len(self.means)} means given for K={self.K}")
            elif self.K < 1:
                raise ConfigError("K must be >= 1")
            if self.domain == "comb-finite" and not 1 <= self.B_int <= self.K:
                raise ConfigError(f"B_int={self.B_int} must be in [1, K={self.K}]")
        else:
            if self.N < 1 or self.B < 0:
                raise ConfigError("N must be >= 1 and B >= 0")
            if self.domain == "cmab-csv":
                if not self.history_csv:
                    raise ConfigError("cmab-csv needs history_csv")
                get_surface(self.surface or "")
            if not 0 < self.delta < 1:
                raise ConfigError("delta must be in (0, 1)")

    def history_spec(self) -> tuple[str, float]:
        mode = self.history_mode.strip()
        if mode == "uniform":
            return "uniform", 0.0
        m = re.fullmatch(r"(spurious-frac|imbalanced-bad-arms)\(([^)]*)\)", mode)
        if not m:
            raise ConfigError(f"history_mode {mode!r} is not uniform, spurious-frac(f) or imbalanced-bad-arms(f)")
        try:
            f = float(m.group(2))
        except ValueError:
            raise ConfigError(f"bad fraction in {mode!r}") from None
        if not 0.0 <= f <= 1.0:
            raise ConfigError(f"fraction {f} outside [0, 1]")
        return m.group(1), f

    @property
    def is_cmab(self) -> bool:
        return self.domain.startswith("cmab")

    @property
    def surface_name(self) -> str:
        if self.domain == "cmab-csv":
            return self.surface
        return self.domain.removeprefix("cmab-")

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "ScenarioConfig":
        kinds = {f.name: f for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            try:
                values[key] = _convert(kinds[key], val)
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: {key}: {exc}") from None
        return cls(**values)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "ScenarioConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, str(path))


def _convert(f, val: str):
    default = f.default
    if isinstance(default, bool):
        return _bool(val)
    if isinstance(default, int):
        return int(val)
    if isinstance(default, float):
        return float(eval_fraction(val))
    if isinstance(default, tuple):
        if f.name in ("algorithms", "metas"):
            return _names(val)
        return tuple(float(eval_fraction(v)) for v in val.split(",") if v.strip())
    return val


def eval_fraction(s: str) -> float:
    """Parse ``0.25`` or ``1/4``."""
    s = s.strip()
    if "/" in s:
        num, den = s.split("/", 1)
        return float(num) / float(den)
    return float(s)


# ---------------------------------------------------------------- instances and history

def build_instance(cfg: ScenarioConfig, seed: int) -> KArmedInstance:
    return KArmedInstance(tuple(cfg.means)) if cfg.means else KArmedInstance.random(cfg.K, seed)


def bad_arms(instance: KArmedInstance, quantile: float = BAD_QUANTILE) -> np.ndarray:
    """The ``ceil(quantile * K)`` lowest-mean arms (ties to the lower index)."""
    k = max(1, math.ceil(quantile * instance.k))
    return np.sort(np.argsort(np.asarray(instance.means), kind="stable")[:k])


def generate_history(instance: KArmedInstance, mode: str, H: int, seed: int, frac: float = 0.0) -> HistoricalDataset:
    """K-armed history.

    ``uniform``: arms uniform. ``imbalanced-bad-arms``: each entry lies on a
    bottom-20% arm with probability ``frac`` and on one of the other arms
    otherwise. ``spurious-frac``: each entry is on the worst arm with
    probability ``frac`` and uniform otherwise. Rewards are Bernoulli.
    """
    if H < 0:
        raise ConfigError("H must be >= 0")
    if not 0.0 <= frac <= 1.0:
        raise ConfigError(f"fraction {frac} outside [0, 1]")
    rng = stream(seed, "history")
    k = instance.k
    if mode == "uniform":
        arms = rng.integers(k, size=H)
    elif mode == "imbalanced-bad-arms":
        bad = bad_arms(instance)
        good = np.setdiff1d(np.arange(k), bad)
        if len(good) == 0:
            good = bad
        on_bad = rng.random(H) < frac
        arms = np.where(on_bad, bad[rng.integers(len(bad), size=H)], good[rng.integers(len(good), size=H)])
    elif mode == "spurious-frac":
        worst = int(np.argmin(instance.means))
        arms = np.where(rng.random(H) < frac, worst, rng.integers(k, size=H))
    else:
        raise ConfigError(f"unknown history mode {mode!r}")
    means = np.asarray(instance.means)[arms]
    rewards = (rng.random(H) < means).astype(float)
    return HistoricalDataset(list(zip(arms.tolist(), rewards.tolist())))


def bad_threshold(surface, levels, quantile: float = BAD_QUANTILE, resolution: float = 1 / 64) -> float:
    """``quantile`` of ``mu(p, max level)`` over a uniform grid of points."""
    g = np.arange(round(1 / resolution) + 1) * resolution
    x, y = np.meshgrid(g, g)
    vals = np.asarray(surface((x.ravel(), y.ravel()), max(levels)))
    return float(np.quantile(vals, quantile))


def generate_spatial_history(surface, levels, mode: str, H: int, seed: int, frac: float = 0.0) -> SpatialHistory:
    """CMAB history: points uniform on the square, levels uniform.

    ``imbalanced-bad-arms`` puts each point in the bottom-20% region (by
    ``mu(p, max level)``) with probability ``frac`` and outside it otherwise;
    ``spurious-frac`` puts it on the worst grid point with probability ``frac``.
    """
    if H < 0:
        raise ConfigError("H must be >= 0")
    if not 0.0 <= frac <= 1.0:
        raise ConfigError(f"fraction {frac} outside [0, 1]")
    rng = stream(seed, "history")
    lv = np.asarray(levels, dtype=float)
    top = float(lv.max())
    pts = rng.random((H, 2))
    if mode == "imbalanced-bad-arms":
        thr = bad_threshold(surface, levels)
        want_bad = rng.random(H) < frac
        todo = np.flatnonzero((np.asarray(surface((pts[:, 0], pts[:, 1]), top)) <= thr) != want_bad)
        while len(todo):
            pts[todo] = rng.random((len(todo), 2))
            ok = (np.asarray(surface((pts[todo, 0], pts[todo, 1]), top)) <= thr) == want_bad[todo]
            todo = todo[~ok]
    elif mode == "spurious-frac":
        g = np.arange(65) / 64
        x, y = (a.ravel() for a in np.meshgrid(g, g, indexing="ij"))
        w = int(np.argmin(np.asarray(surface((x, y), top))))
        on = rng.random(H) < frac
        pts[on] = (x[w], y[w])
    elif mode != "uniform":
        raise ConfigError(f"unknown history mode {mode!r}")
    betas = lv[rng.integers(len(lv), size=H)]
    mu = np.asarray(surface((pts[:, 0], pts[:, 1]), betas), dtype=float)
    rewards = (rng.random(H) < mu).astype(float)
    return SpatialHistory(pts[:, 0], pts[:, 1], betas, rewards)


def scenario_history(cfg: ScenarioConfig, seed: int, instance=None):
    mode, frac = cfg.history_spec()
    if cfg.domain == "cmab-csv":
        return SpatialHistory.from_csv(cfg.history_csv)
    if cfg.is_cmab:
        return generate_spatial_history(get_surface(cfg.surface_name), cfg.levels, mode, cfg.H, seed, frac)
    return generate_history(instance, mode, cfg.H, seed, frac)


# ---------------------------------------------------------------- runs

def build_env(cfg: ScenarioConfig, seed: int):
    """Environment with a fresh reward stack for ``seed``; the K-armed instance comes along."""
    if cfg.is_cmab:
        env = CMABEnv(get_surface(cfg.surface_name), cfg.N, cfg.B, cfg.levels, cfg.eps, seed,
                      resolution=cfg.opt_resolution)
        return env, None
    inst = build_instance(cfg, seed)
    stack = RewardStack(seed, inst.mean)
    if cfg.domain == "comb-finite":
        return CombFiniteEnv(inst, cfg.B_int, stack), inst
    return KArmedEnv(inst, stack), inst


def make_base(cfg: ScenarioConfig, algorithm: str, seed: int):
    psi = PsiSpec(log_term=cfg.log_term, transform=cfg.psi_transform)
    if algorithm == "monucb":
        return MonUCB(cfg.K, cfg.T, psi)
    if algorithm == "comb-monucb":
        return CombMonUCB(cfg.K, cfg.B_int, cfg.T, psi)
    if algorithm == "thompson":
        return ThompsonSampling(cfg.K, stream(seed, "algorithm", "thompson"))
    kw = dict(n_max=cfg.N, budget=cfg.B, levels=cfg.levels, eps=cfg.eps, delta=cfg.delta,
              lipschitz=cfg.L, d_max=cfg.d_max)
    if algorithm == "fixed-disc":
        return FixedDiscretization(cfg.T, gamma=cfg.gamma, **kw)
    if algorithm == "adaptive-disc":
        return AdaptiveDiscretization(cfg.T, **kw)
    raise ConfigError(f"unknown algorithm {algorithm!r}")


def run_pairs(cfg: ScenarioConfig) -> list[tuple[str, str]]:
    """(algorithm, meta) pairs to execute; data-free baselines run once under the label ``baseline``."""
    pairs = []
    for m in cfg.metas:
        if m in ("random", "optimal"):
            pairs.append(("baseline", m))
        else:
            pairs.extend((a, m) for a in cfg.algorithms)
    return pairs


def run_seed(cfg: ScenarioConfig, seed: int) -> dict[tuple[str, str], RunTrace]:
    """Every requested pair on one seed, sharing instance, history and reward tapes."""
    env, inst = build_env(cfg, seed)
    history = scenario_history(cfg, seed, inst)
    out = {}
    for alg, meta in run_pairs(cfg):
        if alg == "baseline":
            rng = stream(seed, "algorithm", "random")
            out[(alg, meta)] = run_policy(None, env, cfg.T, meta, None, rng=rng, timing=cfg.timing)
            continue
        base = make_base(cfg, alg, seed)
        h = history.fresh() if meta != "ignorant" else None
        trace = run_policy(base, env, cfg.T, meta, h, timing=cfg.timing)
        if meta == "ignorant":
            trace.history_size = len(history)
        out[(alg, meta)] = trace
    return out


def _run_seed_rows(args):
    cfg, seed = args
    return seed, {k: trace_rows(seed, tr) for k, tr in run_seed(cfg, seed).items()}


def trace_rows(seed: int, trace: RunTrace) -> list[list]:
    rows = []
    led = trace.ledger
    for t in range(1, led.t + 1):
        unused = "" if trace.history_size == 0 else repr(trace.unused_frac(t))
        regions = "" if trace.regions is None else trace.regions[t - 1]
        wall = "" if trace.wall_ms is None else f"{trace.wall_ms[t - 1]:.3f}"
        rows.append([seed, t, repr(led.regret[t - 1]), led.reads[t - 1], unused, regions, wall])
    return rows


def seed_list(cfg: ScenarioConfig) -> list[int]:
    return [cfg.seed + i for i in range(cfg.seeds)]


def run_scenario(cfg: ScenarioConfig, out_dir: str | os.PathLike | None = None) -> dict:
    """Run all seeds; write one CSV per (algorithm, meta) and ``summary.csv`` if ``out_dir`` is given.

    Returns ``{(algorithm, meta): {seed: rows}}``.
    """
    seeds = seed_list(cfg)
    jobs = [(cfg, s) for s in seeds]
    if cfg.workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_run_seed_rows, jobs))
    else:
        results = [_run_seed_rows(j) for j in jobs]
    table: dict = {}
    for seed, per_pair in sorted(results, key=lambda r: r[0]):
        for key, rows in per_pair.items():
            table.setdefault(key, {})[seed] = rows
    if out_dir is not None:
        write_outputs(table, cfg, out_dir)
    return table


def write_outputs(table: dict, cfg: ScenarioConfig, out_dir: str | os.PathLike) -> None:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for (alg, meta), by_seed in table.items():
            path = out / f"{alg}__{meta}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(COLUMNS)
                for seed in sorted(by_seed):
                    w.writerows(by_seed[seed])
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["algorithm", "meta", "metric", "mean", "se", "seeds"])
            for (alg, meta), by_seed in table.items():
                for metric, vals in final_metrics(by_seed).items():
                    mean, se = mean_se(vals)
                    w.writerow([alg, meta, metric, repr(mean), repr(se), len(vals)])
    except OSError as exc:
        raise OSError(f"{exc.filename or out}: {exc.strerror or exc}") from exc


def final_metrics(by_seed: dict) -> dict[str, list[float]]:
    cols = {"regret": 2, "reads": 3, "unused_frac": 4, "regions": 5}
    out: dict[str, list[float]] = {}
    for name, c in cols.items():
        vals = [float(rows[-1][c]) for rows in by_seed.values() if rows and rows[-1][c] != ""]
        if vals:
            out[name] = vals
    return out


def mean_se(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return math.nan, math.nan
    se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
    return float(v.mean()), se


# ---------------------------------------------------------------- coupling and reads

@dataclass
class CouplingSummary:
    passed: bool
    per_seed: dict[int, str] = field(default_factory=dict)
    divergent: list[int] = field(default_factory=list)


def couple_scenario(cfg: ScenarioConfig, require_iidata: bool = True) -> dict[str, CouplingSummary]:
    """Artificial Replay against Full Start on every seed, for every configured algorithm."""
    out = {}
    for alg in cfg.algorithms:
        if require_iidata and alg not in IIDATA_ALGORITHMS:
            raise ConfigError(f"{alg} is not IIData; coupling is not guaranteed")
        summary = CouplingSummary(True)
        for seed in seed_list(cfg):
            env, inst = build_env(cfg, seed)
            history = scenario_history(cfg, seed, inst)
            rep = verify_coupling(lambda: make_base(cfg, alg, seed), env, history, cfg.T,
                                  require_iidata=require_iidata)
            summary.per_seed[seed] = rep.describe()
            if not rep:
                summary.passed = False
                summary.divergent.append(seed)
        out[alg] = summary
    return out


@dataclass
class ReadsReport:
    before_first: int
    at_T: int
    full_start: int


def report_reads(ar: RunTrace, fs: RunTrace | None = None) -> ReadsReport:
    """Historical reads of an Artificial Replay run before its first online action and at ``T``."""
    fs_reads = fs.reads if fs is not None else ar.history_size
    if ar.ledger.t == 0:
        return ReadsReport(0, 0, fs_reads)
    return ReadsReport(ar.reads_before_first, ar.ledger.reads[-1], fs_reads)


# ---------------------------------------------------------------- validation

def validate_csv(path: str | os.PathLike) -> list[str]:
    """Problems found in a metrics CSV; empty when it is well formed."""
    problems = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        return [f"{path}: {exc.strerror}"]
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != COLUMNS:
            return [f"{path}: header {header} != {COLUMNS}"]
        prev: dict[int, tuple] = {}
        implied_h: dict[int, float] = {}
        for lineno, row in enumerate(reader, start=2):
            where = f"{path}:{lineno}"
            if len(row) != len(COLUMNS):
                problems.append(f"{where}: {len(row)} fields")
                continue
            try:
                seed, t, regret, reads = int(row[0]), int(row[1]), float(row[2]), int(row[3])
                unused = float(row[4]) if row[4] else None
            except ValueError:
                problems.append(f"{where}: unparsable row {row}")
                continue
            p = prev.get(seed)
            exp_t = 1 if p is None else p[0] + 1
            if t != exp_t:
                problems.append(f"{where}: seed {seed} t={t}, expected {exp_t}")
            if p is not None:
                if regret < p[1] - 1e-9:
                    problems.append(f"{where}: regret decreased")
                if reads < p[2]:
                    problems.append(f"{where}: reads decreased")
            if unused is not None:
                if not -1e-12 <= unused <= 1 + 1e-12:
                    problems.append(f"{where}: unused_frac {unused} outside [0, 1]")
                elif unused < 1 - 1e-12:
                    h = reads / (1 - unused)
                    if seed in implied_h and abs(implied_h[seed] - h) > 1e-6 * max(1.0, h):
                        problems.append(f"{where}: unused_frac inconsistent with reads")
                    implied_h.setdefault(seed, h)
            prev[seed] = (t, regret, reads)
    return problems


def validate(path: str | os.PathLike) -> None:
    problems = validate_csv(path)
    if problems:
        raise InvariantViolation("; ".join(problems[:10]) + (" ..." if len(problems) > 10 else ""))


def timed(fn, *args, **kw):
    start = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - start
