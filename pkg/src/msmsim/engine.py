"""Clone-ensemble simulation of one individual's path, and cohort drivers.

The ensemble holds ``m`` copies of one individual that share baseline
covariates X and the treatment path. Ranks of the clones' risk scores give
an estimate of each clone's risk quantile, which feeds the copula h-function
to turn the marginal MSM hazard into per-clone failure probabilities. Only
clone 1 is reported; failed clones 2..m are overwritten by copies of
survivors so that the ensemble keeps tracking the survivor population.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import pandas as pd

from .errors import DomainError, EnsembleExtinctionError, SimulationError
from .rng import Purpose, StreamFactory, open_uniform
from .scenario.expr import Env
from .scenario.model import Dims, Mode, Scenario, parse_scenario, serialize_scenario

TERMINAL_FAILURE = "failure"
TERMINAL_COMPETING = "competing"
TERMINAL_CENSORED = "censored"


# ------------------------------------------------------------------ state


@dataclass
class CloneEnsemble:
    """Per-clone state for one simulated individual."""

    x: np.ndarray
    identity: np.ndarray
    b: np.ndarray
    l: np.ndarray  # (K+1, m, dim L)
    a: list = field(default_factory=list)
    alive: np.ndarray | None = None  # Z_{k+1} = 1, competing-risks runs only

    @property
    def m(self) -> int:
        return self.identity.size

    def copy_from(self, targets: np.ndarray, donors: np.ndarray, k: int):
        """Overwrite clones ``targets`` with the state of ``donors`` up to visit ``k``."""
        self.identity[targets] = self.identity[donors]
        self.b[targets] = self.b[donors]
        self.l[: k + 1, targets] = self.l[: k + 1, donors]
        if self.alive is not None:
            self.alive[targets] = self.alive[donors]


class EnsembleEnv(Env):
    """Expression bindings over all clones (``rows=None``) or clone 1 only."""

    __slots__ = ("k", "ens", "rows", "defaults")

    def __init__(self, ens: CloneEnsemble, k: int, defaults: dict, rows=None):
        self.ens = ens
        self.k = k
        self.defaults = defaults
        self.rows = slice(None) if rows is None else rows

    def x(self, i):
        return self.ens.x[i - 1]

    def b(self, i):
        return self.ens.b[self.rows, i - 1]

    def l(self, i, lag):
        j = self.k - lag
        if j < 0:
            return self.defaults.get(f"L{i}", 0.0)
        return self.ens.l[j, self.rows, i - 1]

    def a(self, lag):
        j = self.k - lag
        if j < 0:
            return self.defaults.get("A", 0.0)
        return self.ens.a[j]


class _BaselineEnv(Env):
    __slots__ = ("xs", "bs")

    def __init__(self, xs, bs=None):
        self.xs = xs
        self.bs = bs

    def x(self, i):
        return self.xs[i - 1]

    def b(self, i):
        return self.bs[:, i - 1]


@dataclass
class VisitRecord:
    k: int
    l: np.ndarray
    a: float
    y: int
    z: int | None = None
    u: float = float("nan")


@dataclass
class IndividualPath:
    """Observed data for clone 1 of one ensemble run."""

    x: np.ndarray
    b: np.ndarray
    records: list = field(default_factory=list)
    terminal: str = TERMINAL_CENSORED
    time: int = 0
    clipped: int = 0
    refreshed_at: int | None = None

    @property
    def visits(self) -> int:
        return len(self.records)


# -------------------------------------------------------------- kernels


def rank_quantiles(scores, rng: np.random.Generator, tie_rng: np.random.Generator | None = None):
    """Risk quantiles ``U_j = (R_j - W_j) / m`` from ranks of ``scores``.

    Returns ``(U, R)`` with 1-based ranks ``R``. Ties are broken by an
    independent uniform key drawn from ``tie_rng`` (``rng`` if omitted), and
    only when ties are present.
    """
    h = np.asarray(scores, dtype=float)
    m = h.size
    if m == 0:
        raise DomainError("rank_quantiles needs at least one score")
    order = np.argsort(h)
    sh = h[order]
    if m > 1 and np.any(sh[1:] == sh[:-1]):
        jitter = (tie_rng or rng).random(m)
        order = np.lexsort((jitter, h))
    ranks = np.empty(m, dtype=np.int64)
    ranks[order] = np.arange(1, m + 1)
    w = open_uniform(rng, m)
    return (ranks - w) / m, ranks


def failure_probabilities(scenario_copula, mode: Mode, g: float, u: np.ndarray, ranks: np.ndarray) -> np.ndarray:
    """Per-clone failure probabilities; in generalised mode sorted Q are assigned by rank."""
    if g <= 0.0:
        return np.zeros(u.size)
    if g >= 1.0:
        return np.ones(u.size)
    q = scenario_copula.h(g, u)
    if mode is Mode.GENERALISED:
        q = np.sort(q)[ranks - 1]
    return q


def _broadcast(v, m: int) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape == (m,):
        return v
    return np.broadcast_to(v, (m,)).copy()


# --------------------------------------------------------- individual run


class _Hooks:
    """Competing-event behaviour; the default is the plain algorithm."""

    has_z = False

    def competing_step(self, s, ens, env, k, streams):
        return None

    def failure_probs(self, s, g, u, ranks, n_eligible, m):
        return failure_probabilities(s.copula, s.mode, g, u, ranks)

    def needs_replacing(self, failed, ens):
        return failed

    def donors(self, failed, ens):
        return ~failed


_PLAIN = _Hooks()


def _hazard(s: Scenario, msm, env: Env, path: IndividualPath) -> float:
    g, clipped = msm.hazard(env, strict=s.strict)
    if clipped:
        path.clipped += 1
    return g


def simulate_individual(
    s: Scenario,
    streams: StreamFactory,
    regime=None,
    hooks: _Hooks = _PLAIN,
    observer: Callable | None = None,
) -> IndividualPath:
    """Core loop shared by the plain and competing-risks algorithms.

    ``observer(k, ens, failed)``, if given, is called after each visit's
    matching step (used by tests to check the ensemble bookkeeping).
    """
    K, m = s.K, s.m
    dims = s.dims
    defaults = s.defaults
    regime = s.intervention if regime is None else tuple(float(a) for a in regime)
    if regime is not None and len(regime) != K + 1:
        raise DomainError(f"regime has length {len(regime)}, expected K+1 = {K + 1}")

    base_rng = streams.stream(-1, Purpose.BASELINE)
    xs = np.zeros(dims.x)
    benv = _BaselineEnv(xs)
    for i, d in enumerate(s.baseline_x):
        xs[i] = d.sample(benv, base_rng)
    bs = np.zeros((m, dims.b))
    benv.bs = bs
    for i, d in enumerate(s.baseline_b):
        bs[:, i] = d.sample(benv, base_rng, size=m)

    ens = CloneEnsemble(
        x=xs,
        identity=np.arange(1, m + 1),
        b=bs,
        l=np.zeros((K + 1, m, dims.l)),
        alive=np.ones(m, dtype=bool) if hooks.has_z else None,
    )
    path = IndividualPath(x=xs.copy(), b=bs[0].copy())
    refresh = s.refresh
    copula = s.copula

    for k in range(K + 1):
        env = EnsembleEnv(ens, k, defaults)
        m = ens.m
        # confounders for every clone
        conf_rng = streams.stream(k, Purpose.CONFOUNDER)
        for i, pv in enumerate(s.confounders):
            ens.l[k, :, i] = pv.at(k).sample(env, conf_rng, size=m)
        # treatment of clone 1, shared by all clones
        if regime is not None:
            a_k = regime[k]
        else:
            one = EnsembleEnv(ens, k, defaults, rows=slice(0, 1))
            a_k = s.treatment.at(k).sample(one, streams.stream(k, Purpose.TREATMENT))
        ens.a.append(a_k)

        # competing event first (drawn before failure)
        z_next = hooks.competing_step(s, ens, env, k, streams)
        if z_next is not None and not z_next[0]:
            path.records.append(VisitRecord(k, ens.l[k, 0].copy(), a_k, 1, 0))
            path.terminal, path.time = TERMINAL_COMPETING, k + 1
            return path

        # risk scores, risk quantiles, failure
        h = _broadcast(s.risk_fn(k)(env), m)
        g = _hazard(s, s.msm, env, path)
        fail_rng = streams.stream(k, Purpose.FAILURE)
        v = fail_rng.random(m)
        if z_next is None:
            u, ranks = rank_quantiles(h, streams.stream(k, Purpose.JITTER), streams.stream(k, Purpose.TIES))
            p = failure_probabilities(copula, s.mode, g, u, ranks)
            failed = v < p
            u1 = u[0]
        else:
            elig = np.flatnonzero(z_next)
            u, ranks = rank_quantiles(h[elig], streams.stream(k, Purpose.JITTER), streams.stream(k, Purpose.TIES))
            p = hooks.failure_probs(s, g, u, ranks, elig.size, m)
            failed = np.zeros(m, dtype=bool)
            failed[elig] = v[elig] < p
            u1 = u[0]  # clone 1 is eligible here, and first in elig
        y1 = 0 if failed[0] else 1
        path.records.append(VisitRecord(k, ens.l[k, 0].copy(), a_k, y1, None if z_next is None else 1, float(u1)))

        # stop on failure of clone 1 or at the last visit
        if failed[0]:
            path.terminal, path.time = TERMINAL_FAILURE, k + 1
            return path
        if k == K:
            path.terminal, path.time = TERMINAL_CENSORED, K + 1
            return path

        # replace failed clones 2..m by random surviving clones 2..m
        if z_next is not None:
            ens.alive = z_next
        replace = hooks.needs_replacing(failed, ens)
        replace[0] = False
        targets = np.flatnonzero(replace)
        if targets.size:
            ok = hooks.donors(failed, ens)
            ok[0] = False
            pool = np.flatnonzero(ok)
            if pool.size == 0:
                raise EnsembleExtinctionError(
                    f"ensemble extinction at visit {k}: no surviving clone among 2..{m} to copy"
                )
            picks = pool[streams.stream(k, Purpose.DONOR).integers(0, pool.size, targets.size)]
            ens.copy_from(targets, picks, k)

        if observer is not None:
            observer(k, ens, failed)

        if refresh is not None and path.refreshed_at is None:
            distinct = np.unique(ens.identity[1:]).size
            if distinct < refresh.threshold * (m - 1):
                _refresh(ens, refresh.m_big, k, streams.stream(k, Purpose.REFRESH))
                path.refreshed_at = k
    return path


def _refresh(ens: CloneEnsemble, m_big: int, k: int, rng: np.random.Generator):
    """Grow the ensemble to ``m_big`` clones by resampling clones 2..m, keeping clone 1."""
    m = ens.m
    src = np.concatenate(([0], 1 + rng.integers(0, m - 1, m_big - 1)))
    ens.identity = np.arange(1, m_big + 1)
    ens.b = ens.b[src].copy()
    K1 = ens.l.shape[0]
    new_l = np.zeros((K1, m_big, ens.l.shape[2]))
    new_l[: k + 1] = ens.l[: k + 1, src]
    ens.l = new_l
    if ens.alive is not None:
        ens.alive = ens.alive[src].copy()


def run_extended_individual(s: Scenario, streams: StreamFactory, regime=None) -> IndividualPath:
    """Extended (or, with ``mode=generalised``, Generalised Extended) algorithm."""
    if s.competing is not None:
        raise DomainError("scenario has a competing-event config; use the competing-risks runners")
    return simulate_individual(s, streams, regime)


RiskCdf = Callable[[int, np.ndarray, np.ndarray, float], float]


def run_basic_individual(s: Scenario, streams: StreamFactory, risk_cdf: RiskCdf | None, regime=None) -> IndividualPath:
    """Basic algorithm for scenarios whose risk-score CDF among survivors is known.

    ``risk_cdf(k, h, x, a_k)`` must return ``F_{H_k}(h | X = x, survived to k)``.
    Only clone 1 is simulated, so ``m`` plays no role.
    """
    if risk_cdf is None:
        raise DomainError("the basic algorithm needs an analytic risk-score CDF")
    K = s.K
    dims = s.dims
    regime = s.intervention if regime is None else tuple(float(a) for a in regime)
    base_rng = streams.stream(-1, Purpose.BASELINE)
    xs = np.zeros(dims.x)
    benv = _BaselineEnv(xs)
    for i, d in enumerate(s.baseline_x):
        xs[i] = d.sample(benv, base_rng)
    bs = np.zeros((1, dims.b))
    benv.bs = bs
    for i, d in enumerate(s.baseline_b):
        bs[:, i] = d.sample(benv, base_rng, size=1)
    ens = CloneEnsemble(x=xs, identity=np.ones(1, dtype=np.int64), b=bs, l=np.zeros((K + 1, 1, dims.l)))
    path = IndividualPath(x=xs.copy(), b=bs[0].copy())
    for k in range(K + 1):
        env = EnsembleEnv(ens, k, s.defaults)
        conf_rng = streams.stream(k, Purpose.CONFOUNDER)
        for i, pv in enumerate(s.confounders):
            ens.l[k, :, i] = pv.at(k).sample(env, conf_rng, size=1)
        if regime is not None:
            a_k = regime[k]
        else:
            a_k = s.treatment.at(k).sample(env, streams.stream(k, Purpose.TREATMENT))
        ens.a.append(a_k)
        h = float(np.asarray(s.risk_fn(k)(env)).ravel()[0])
        u = float(risk_cdf(k, h, xs, a_k))
        g = _hazard(s, s.msm, env, path)
        p = 0.0 if g <= 0 else 1.0 if g >= 1 else float(s.copula.h(g, u))
        fail = streams.stream(k, Purpose.FAILURE).random() < p
        path.records.append(VisitRecord(k, ens.l[k, 0].copy(), a_k, 0 if fail else 1, None, u))
        if fail:
            path.terminal, path.time = TERMINAL_FAILURE, k + 1
            return path
    path.terminal, path.time = TERMINAL_CENSORED, K + 1
    return path


# --------------------------------------------------------------- cohorts


@dataclass
class PanelDataset:
    """Long-format person-visit rows.

    Columns: ``id, k, X1.., B1.., L1.., A, Y`` and, for competing-risks
    scenarios, ``Z``; ``Y`` and ``Z`` are the indicators at visit k+1. ``U``
    is clone 1's estimated risk quantile at visit k (a diagnostic).
    """

    frame: pd.DataFrame
    dims: Dims
    K: int
    competing: bool = False

    @property
    def n_individuals(self) -> int:
        return int(self.frame["id"].nunique()) if len(self.frame) else 0

    def covariate_columns(self) -> list[str]:
        d = self.dims
        return [f"X{i}" for i in range(1, d.x + 1)] + [f"B{i}" for i in range(1, d.b + 1)] + [f"L{i}" for i in range(1, d.l + 1)]

    def columns(self) -> list[str]:
        cols = ["id", "k"] + self.covariate_columns() + ["A", "Y"]
        if self.competing:
            cols.append("Z")
        return cols + ["U"]

    def to_csv(self, path_or_buf, compression=None):
        return self.frame.to_csv(path_or_buf, index=False, lineterminator="\n", compression=compression)

    @classmethod
    def from_csv(cls, path_or_buf, dims: Dims, K: int) -> "PanelDataset":
        frame = pd.read_csv(path_or_buf, float_precision="round_trip")
        competing = "Z" in frame.columns
        ds = cls(frame, dims, K, competing)
        missing = [c for c in ds.columns() if c not in frame.columns]
        if missing:
            raise DomainError(f"dataset is missing columns {missing}")
        validate_panel(ds)
        return ds


def validate_panel(ds: PanelDataset) -> None:
    f = ds.frame
    if not len(f):
        return
    ids = f["id"].to_numpy()
    ks = f["k"].to_numpy()
    if np.any(np.diff(ids) < 0):
        raise DomainError("dataset rows are not sorted by id")
    first = np.r_[True, ids[1:] != ids[:-1]]
    if np.any(ks[first] != 0):
        raise DomainError("every individual's first visit must be 0")
    if np.any(ks[~first] != ks[np.flatnonzero(~first) - 1] + 1):
        raise DomainError("visits within an individual must be consecutive")
    uniq = np.unique(ids)
    if not np.array_equal(uniq, np.arange(1, uniq.size + 1)):
        raise DomainError("individual ids must be dense 1..n")


def paths_to_frame(paths: list[IndividualPath], ids, dims: Dims, competing: bool) -> pd.DataFrame:
    rows = sum(p.visits for p in paths)
    cols: dict[str, np.ndarray] = {"id": np.empty(rows, dtype=np.int64), "k": np.empty(rows, dtype=np.int64)}
    xcols = np.empty((rows, dims.x))
    bcols = np.empty((rows, dims.b))
    lcols = np.empty((rows, dims.l))
    a = np.empty(rows)
    y = np.empty(rows, dtype=np.int64)
    z = np.empty(rows, dtype=np.int64)
    u = np.empty(rows)
    r = 0
    for ident, p in zip(ids, paths):
        n = p.visits
        sl = slice(r, r + n)
        cols["id"][sl] = ident
        cols["k"][sl] = [rec.k for rec in p.records]
        xcols[sl] = p.x
        bcols[sl] = p.b
        if dims.l:
            lcols[sl] = np.array([rec.l for rec in p.records])
        a[sl] = [rec.a for rec in p.records]
        y[sl] = [rec.y for rec in p.records]
        z[sl] = [1 if rec.z is None else rec.z for rec in p.records]
        u[sl] = [rec.u for rec in p.records]
        r += n
    for i in range(dims.x):
        cols[f"X{i + 1}"] = xcols[:, i]
    for i in range(dims.b):
        cols[f"B{i + 1}"] = bcols[:, i]
    for i in range(dims.l):
        cols[f"L{i + 1}"] = lcols[:, i]
    cols["A"] = a
    cols["Y"] = y
    if competing:
        cols["Z"] = z
    cols["U"] = u
    return pd.DataFrame(cols)


def _runner(s: Scenario):
    if s.competing is None:
        return lambda sc, st, regime: simulate_individual(sc, st, regime)
    from .competing import run_causespecific_individual, run_subdistribution_individual
    from .scenario.model import Variant

    if s.competing.variant is Variant.SUBDISTRIBUTION:
        return run_subdistribution_individual
    return run_causespecific_individual


def _simulate_ids(s: Scenario, ids, seed: int, regime) -> list[IndividualPath]:
    run = _runner(s)
    out = []
    for i in ids:
        try:
            out.append(run(s, StreamFactory(seed, int(i)), regime))
        except SimulationError as exc:
            exc.individual = int(i)
            exc.args = (f"individual {int(i)}: {exc}",)
            raise
    return out


_WORKER_SCENARIO: Scenario | None = None


def _worker_init(text: str):
    global _WORKER_SCENARIO
    _WORKER_SCENARIO = parse_scenario(text)


def _worker_chunk(args):
    lo, hi, seed, regime = args
    s = _WORKER_SCENARIO
    paths = _simulate_ids(s, range(lo, hi), seed, regime)
    return paths_to_frame(paths, range(lo, hi), s.dims, s.competing is not None)


def default_workers() -> int:
    return int(os.environ.get("MSMSIM_WORKERS", "1"))


def simulate_cohort(s: Scenario, n: int, seed: int, workers: int | None = None, regime=None, chunk: int = 250) -> PanelDataset:
    """Simulate ``n`` independent individuals with ids ``1..n``.

    Individual ``i`` draws only from ``StreamFactory(seed, i)``, so the
    result is identical for every worker count.
    """
    if n < 1:
        raise DomainError("n must be >= 1")
    workers = default_workers() if workers is None else int(workers)
    if workers < 1:
        raise DomainError("workers must be >= 1")
    competing = s.competing is not None
    if workers == 1:
        paths = _simulate_ids(s, range(1, n + 1), seed, regime)
        frame = paths_to_frame(paths, range(1, n + 1), s.dims, competing)
    else:
        bounds = [(lo, min(lo + chunk, n + 1), seed, regime) for lo in range(1, n + 1, chunk)]
        with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init, initargs=(serialize_scenario(s),)) as ex:
            frames = list(ex.map(_worker_chunk, bounds))
        frame = pd.concat(frames, ignore_index=True)
    return PanelDataset(frame, s.dims, s.K, competing)


def simulate_counterfactual(s: Scenario, regime, n: int, seed: int, workers: int | None = None) -> PanelDataset:
    """Cohort under the static regime ``regime`` (treatment draws replaced)."""
    regime = tuple(float(a) for a in regime)
    if len(regime) != s.K + 1:
        raise DomainError(f"regime has length {len(regime)}, expected K+1 = {s.K + 1}")
    return simulate_cohort(s, n, seed, workers, regime=regime)
