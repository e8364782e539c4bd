"""MSM validation: person-time expansion, stabilized weights, pooled logistic fits.

The pooled logistic model is fitted by iteratively reweighted least squares
written out here rather than through a modelling package, because the fit
needs both model-based and cluster-robust (sandwich) covariances, explicit
separation and rank-deficiency diagnostics and the stated stopping rules.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit, xlog1py, xlogy

from .engine import PanelDataset
from .errors import (
    ConvergenceError,
    DomainError,
    PositivityError,
    RankDeficiencyError,
    SeparationError,
)
from .scenario.expr import Env, variables
from .scenario.model import DistKind, Scenario


class HazardKind(str, enum.Enum):
    PLAIN = "plain"
    SUBDISTRIBUTION = "subdistribution"
    CAUSE_SPECIFIC = "cause_specific"


# --------------------------------------------------------------- rows


@dataclass
class PersonTimeRow:
    id: int
    k: int
    event: int
    covariates: dict
    weight: float = 1.0


@dataclass
class PersonTime:
    """Person-time table: one row per at-risk person-visit.

    ``frame`` holds ``id, k, event, weight`` plus the panel's covariate
    columns and ``A``. ``extended`` marks subdistribution rows added after a
    competing event (their L columns repeat the last observed values).
    """

    frame: pd.DataFrame
    kind: HazardKind
    K: int

    def __len__(self):
        return len(self.frame)

    def rows(self):
        cov = [c for c in self.frame.columns if c not in ("id", "k", "event", "weight")]
        for rec in self.frame.itertuples(index=False):
            d = rec._asdict()
            yield PersonTimeRow(int(d["id"]), int(d["k"]), int(d["event"]), {c: d[c] for c in cov}, float(d["weight"]))


def expand_person_time(data: PanelDataset, kind="plain", regime=None, weights=None) -> PersonTime:
    """Rows at risk under the hazard definition ``kind``.

    plain: every observed visit (``Y_k = 1``); subdistribution: additionally
    visits after a competing event up to K, with event 0; cause_specific:
    observed visits with ``Z_{k+1} = 1``. ``event = 1 - Y_{k+1}``. Added
    subdistribution rows take A from ``regime`` when given, otherwise the
    last observed A, and carry the last weight.
    """
    kind = HazardKind(kind)
    f = data.frame
    if kind is not HazardKind.PLAIN and "Z" not in f.columns:
        raise DomainError(f"{kind.value} expansion needs a Z column")
    w = np.ones(len(f)) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (len(f),):
        raise DomainError("weights must have one entry per dataset row")
    if np.any(~(w > 0)):
        raise DomainError("weights must be positive")
    out = f.drop(columns=[c for c in ("U",) if c in f.columns]).copy()
    out["event"] = 1 - out["Y"].astype(np.int64)
    out["weight"] = w
    out["extended"] = False
    if kind is HazardKind.CAUSE_SPECIFIC:
        out = out[out["Z"] == 1]
    elif kind is HazardKind.SUBDISTRIBUTION:
        last = out.groupby("id", sort=False).tail(1)
        comp = last[(last["Z"] == 0) & (last["k"] < data.K)]
        if len(comp):
            reps = (data.K - comp["k"]).to_numpy()
            extra = comp.loc[comp.index.repeat(reps)].copy()
            step = np.concatenate([np.arange(1, r + 1) for r in reps])
            extra["k"] = extra["k"].to_numpy() + step
            extra["event"] = 0
            extra["extended"] = True
            if regime is not None:
                regime = np.asarray(regime, dtype=float)
                extra["A"] = regime[extra["k"].to_numpy()]
            out = pd.concat([out, extra])
            out = out.sort_values(["id", "k"], kind="stable")
    cols = [c for c in out.columns if c not in ("Y",)]
    return PersonTime(out[cols].reset_index(drop=True), kind, data.K)


# ------------------------------------------------------ evaluation on rows


class FrameEnv(Env):
    """Bindings for the rows of one visit ``k`` of a long table.

    ``lag(col, d)`` gives the value ``d`` visits earlier within the same id;
    it is precomputed on the full table by :func:`_lag_columns`.
    """

    def __init__(self, rows: pd.DataFrame, k: int, lags: dict, defaults: dict):
        self.rows = rows
        self.k = k
        self.lags = lags
        self.defaults = defaults

    def x(self, i):
        return self.rows[f"X{i}"].to_numpy()

    def b(self, i):
        return self.rows[f"B{i}"].to_numpy()

    def _lagged(self, name, lag):
        if lag == 0:
            return self.rows[name].to_numpy()
        if self.k - lag < 0:
            return np.full(len(self.rows), self.defaults.get(name, 0.0))
        return self.lags[(name, lag)][self.rows.index].to_numpy()

    def l(self, i, lag):
        return self._lagged(f"L{i}", lag)

    def a(self, lag):
        return self._lagged("A", lag)


def _lag_columns(frame: pd.DataFrame, exprs) -> dict:
    need = set()
    for e in exprs:
        for v in variables(e):
            if v.kind == "A" and v.lag:
                need.add(("A", v.lag))
            elif v.kind == "L" and v.lag:
                need.add((f"L{v.index}", v.lag))
    g = frame.groupby("id", sort=False)
    return {(name, lag): g[name].shift(lag) for name, lag in need}


def _per_visit(frame: pd.DataFrame, exprs_by_k, fn, defaults) -> np.ndarray:
    """Evaluate ``fn(env, k)`` for each visit's rows and scatter into one array."""
    lags = _lag_columns(frame, exprs_by_k)
    out = np.empty(len(frame))
    ks = frame["k"].to_numpy()
    for k in np.unique(ks):
        sel = np.flatnonzero(ks == k)
        env = FrameEnv(frame.iloc[sel], int(k), lags, defaults)
        out[sel] = np.broadcast_to(np.asarray(fn(env, int(k)), dtype=float), sel.shape)
    return out


def msm_design(pt: PersonTime | pd.DataFrame, s: Scenario, msm=None) -> tuple[np.ndarray, list[str]]:
    """Design matrix: one intercept indicator per visit, then the MSM terms."""
    msm = s.msm if msm is None else msm
    frame = pt.frame if isinstance(pt, PersonTime) else pt
    frame = frame.reset_index(drop=True)
    ks = frame["k"].to_numpy()
    cols = [(ks == k).astype(float) for k in range(s.K + 1)]
    exprs = [t.expr for t in msm.terms]
    for t, fn in zip(msm.terms, msm._fns):
        cols.append(_per_visit(frame, exprs, lambda env, k, fn=fn: fn(env), s.defaults))
    return np.column_stack(cols), msm.parameter_names


def msm_hazard_rows(pt: PersonTime | pd.DataFrame, s: Scenario) -> np.ndarray:
    """True MSM hazard ``g_{k+1}`` for every row."""
    X, _ = msm_design(pt, s)
    lp = X @ s.msm.coefficients
    if s.msm.link.value == "logit":
        return expit(lp)
    return np.clip(lp, 0.0, 1.0)


# ------------------------------------------------------------- weights


def _treatment_density(data: pd.DataFrame, s: Scenario) -> np.ndarray:
    exprs = [p for _, d in s.treatment.items() for p in d.params]

    def dens(env, k):
        return s.treatment.at(k).density(env.rows["A"].to_numpy(), env)

    return _per_visit(data, exprs, dens, s.defaults)


def _numerator_design(frame: pd.DataFrame, s: Scenario, full: bool = False) -> np.ndarray:
    """(1, X, A_{k-1}, k) and, when ``full``, also (B, L_k, L_{k-1})."""
    g = frame.groupby("id", sort=False)
    a_prev = g["A"].shift(1).fillna(s.defaults.get("A", 0.0)).to_numpy()
    cols = [np.ones(len(frame))]
    cols += [frame[f"X{i}"].to_numpy(dtype=float) for i in range(1, s.dims.x + 1)]
    cols += [a_prev, frame["k"].to_numpy(dtype=float)]
    if full:
        cols += [frame[f"B{i}"].to_numpy(dtype=float) for i in range(1, s.dims.b + 1)]
        for i in range(1, s.dims.l + 1):
            cols.append(frame[f"L{i}"].to_numpy(dtype=float))
            cols.append(g[f"L{i}"].shift(1).fillna(s.defaults.get(f"L{i}", 0.0)).to_numpy())
    return np.column_stack(cols)


def _fitted_density(frame: pd.DataFrame, s: Scenario, full: bool) -> np.ndarray:
    D = _numerator_design(frame, s, full)
    a = frame["A"].to_numpy(dtype=float)
    kinds = {d.kind for _, d in s.treatment.items()}
    if kinds == {DistKind.BERNOULLI}:
        fit = fit_pooled_logistic(D, a, max_iter=50)
        p = expit(D @ fit.coef)
        return np.where(a == 1.0, p, 1.0 - p)
    beta, *_ = np.linalg.lstsq(D, a, rcond=None)
    resid = a - D @ beta
    sd = np.sqrt(np.mean(resid ** 2))
    return np.exp(-0.5 * (resid / sd) ** 2) / (sd * np.sqrt(2 * np.pi))


def stabilized_weights(data: PanelDataset, s: Scenario, denominator: str = "true") -> np.ndarray:
    """Stabilized inverse probability of treatment weights, one per panel row.

    ``w_{ik} = prod_{j <= k} f(A_j | X, A_{j-1}, j) / f(A_j | X, B, L-history, A-history)``.
    The numerator is fitted (pooled logistic for Bernoulli treatments,
    linear-normal otherwise). The denominator is the scenario's own law when
    ``denominator="true"``; ``"fitted"`` uses a model on (X, B, L_k, L_{k-1},
    A_{k-1}, k) instead.
    """
    frame = data.frame.reset_index(drop=True)
    if s.intervention is not None:
        return np.ones(len(frame))
    if not len(frame):
        return np.ones(0)
    if denominator == "true":
        den = _treatment_density(frame, s)
    elif denominator == "fitted":
        den = _fitted_density(frame, s, full=True)
    else:
        raise DomainError(f"unknown denominator {denominator!r} (expected true or fitted)")
    bad = np.flatnonzero(~(den > 0))
    if bad.size:
        r = frame.iloc[bad[0]]
        raise PositivityError(f"zero treatment probability at id {int(r['id'])}, visit {int(r['k'])}")
    num = _fitted_density(frame, s, full=False)
    ratio = pd.Series(np.log(num) - np.log(den))
    return np.exp(ratio.groupby(frame["id"].to_numpy()).cumsum().to_numpy())


# ---------------------------------------------------------------- fits


@dataclass
class FitResult:
    """Outcome of a pooled logistic fit."""

    coef: np.ndarray
    cov_model: np.ndarray
    cov_robust: np.ndarray
    converged: bool
    iterations: int
    loglik: float
    names: list = field(default_factory=list)

    @property
    def se_model(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov_model))

    @property
    def se_robust(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov_robust))

    def table(self, truth=None) -> pd.DataFrame:
        out = pd.DataFrame({"parameter": self.names or range(self.coef.size), "estimate": self.coef,
                            "se_model": self.se_model, "se_robust": self.se_robust})
        if truth is not None:
            out.insert(1, "true", np.asarray(truth, dtype=float))
        return out


def _loglik(y, w, eta):
    # log expit(eta) = -log1p(exp(-eta)), written to stay finite for large |eta|
    return float(np.sum(w * (y * -np.logaddexp(0.0, -eta) + (1 - y) * -np.logaddexp(0.0, eta))))


def fit_pooled_logistic(
    X,
    y,
    weights=None,
    groups=None,
    names=None,
    max_iter: int = 50,
    score_tol: float = 1e-8,
    ll_tol: float = 1e-10,
) -> FitResult:
    """Weighted Bernoulli maximum likelihood by IRLS.

    Stops when ``max |score| < score_tol`` or the relative change in the
    log-likelihood drops below ``ll_tol``. The sandwich covariance clusters
    score contributions by ``groups`` (rows are their own clusters when
    omitted).

    Raises
    ------
    RankDeficiencyError
        The weighted design matrix is not of full column rank.
    SeparationError
        Coefficients diverge while fitted probabilities approach 0 or 1.
    ConvergenceError
        No convergence within ``max_iter`` iterations.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if y.shape != (n,) or w.shape != (n,):
        raise DomainError("X, y and weights disagree in length")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DomainError("weights must be finite and non-negative")
    if not np.any((y > 0) & (w > 0)):
        raise DomainError("no events to fit")
    sw = np.sqrt(w)[:, None] * X
    if np.linalg.matrix_rank(sw) < p:
        raise RankDeficiencyError(f"design matrix has rank {np.linalg.matrix_rank(sw)} < {p} columns")

    beta = np.zeros(p)
    eta = X @ beta
    ll = _loglik(y, w, eta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(eta)
        score = X.T @ (w * (y - mu))
        if np.max(np.abs(score)) < score_tol:
            converged = True
            it -= 1
            break
        info = (X * (w * mu * (1 - mu))[:, None]).T @ X
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise SeparationError("information matrix became singular; fitted probabilities reached 0 or 1") from None
        # step halving keeps the log-likelihood non-decreasing
        t = 1.0
        for _ in range(30):
            cand = beta + t * step
            eta_c = X @ cand
            ll_c = _loglik(y, w, eta_c)
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        change = abs(ll_c - ll) / max(abs(ll), 1e-300)
        beta, eta, ll = cand, eta_c, ll_c
        if np.max(np.abs(eta)) > 30 and np.max(np.abs(beta)) > 25:
            raise SeparationError(
                f"coefficients diverging (max |beta| = {np.max(np.abs(beta)):.3g}); the data appear separated"
            )
        if change < ll_tol:
            converged = True
            break
    if not converged:
        raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations")

    mu = expit(eta)
    info = (X * (w * mu * (1 - mu))[:, None]).T @ X
    bread = np.linalg.inv(info)
    # quasi-complete separation: the likelihood flattens out while a
    # coefficient runs off with an exploding variance
    var = np.diag(bread)
    diverged = (np.abs(beta) > 10) & (var > 1e6)
    if diverged.any():
        j = int(np.flatnonzero(diverged)[0])
        label = names[j] if names is not None else f"column {j}"
        raise SeparationError(f"separation detected: coefficient {label} diverges (estimate {beta[j]:.3g})")
    u = X * (w * (y - mu))[:, None]
    if groups is not None:
        u = pd.DataFrame(u).groupby(np.asarray(groups)).sum().to_numpy()
    meat = u.T @ u
    robust = bread @ meat @ bread
    bread = 0.5 * (bread + bread.T)
    robust = 0.5 * (robust + robust.T)
    return FitResult(beta, bread, robust, True, it, ll, list(names) if names is not None else [])


def bernoulli_loglik(beta, X, y, weights=None) -> float:
    """Weighted Bernoulli log-likelihood, for oracles and diagnostics."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones(y.size) if weights is None else np.asarray(weights, dtype=float)
    mu = expit(X @ np.asarray(beta, dtype=float))
    return float(np.sum(w * (xlogy(y, mu) + xlog1py(1 - y, -mu))))


def fit_msm(pt: PersonTime, s: Scenario, use_weights: bool = True) -> FitResult:
    """Pooled logistic fit of the scenario's MSM to a person-time table."""
    X, names = msm_design(pt, s)
    f = pt.frame
    w = f["weight"].to_numpy() if use_weights else None
    return fit_pooled_logistic(X, f["event"].to_numpy(), w, groups=f["id"].to_numpy(), names=names)


# --------------------------------------------------------- empirical hazards


def empirical_hazard(data: PanelDataset | PersonTime, kind="plain", regime=None, by: str | None = None) -> pd.DataFrame:
    """Events over at-risk rows per visit (and per ``by`` level).

    Columns ``k, at_risk, events, hazard, se`` with ``se = sqrt(h (1 - h) / n)``.
    Visits with an empty risk set are reported with missing hazard and SE.
    """
    pt = data if isinstance(data, PersonTime) else expand_person_time(data, kind, regime)
    f = pt.frame
    keys = ["k"] if by is None else ["k", by]
    grp = f.groupby(keys)["event"].agg(["size", "sum"]).rename(columns={"size": "at_risk", "sum": "events"})
    if by is None:
        idx = pd.Index(range(pt.K + 1), name="k")
    else:
        idx = pd.MultiIndex.from_product([range(pt.K + 1), sorted(f[by].unique())], names=keys)
    grp = grp.reindex(idx)
    grp["at_risk"] = grp["at_risk"].fillna(0).astype(np.int64)
    grp["events"] = grp["events"].fillna(0).astype(np.int64)
    n = grp["at_risk"].to_numpy()
    with np.errstate(invalid="ignore", divide="ignore"):
        h = np.where(n > 0, grp["events"].to_numpy() / np.maximum(n, 1), np.nan)
        se = np.where(n > 0, np.sqrt(h * (1 - h) / np.maximum(n, 1)), np.nan)
    grp["hazard"] = h
    grp["se"] = se
    return grp.reset_index()


def hazard_check(data: PanelDataset, s: Scenario, kind="plain", regime=None) -> pd.DataFrame:
    """Per-visit comparison of empirical hazards with the MSM.

    ``target`` is the mean of ``g_{k+1}(a_k, X)`` over the rows at risk,
    which is the expected pooled hazard when the data are MSM-compatible.
    ``z = (hazard - target) / se`` uses the binomial SE, or
    ``sqrt(target (1 - target) / n)`` when the empirical hazard is 0 or 1
    (so that a zero event count against a positive target is not infinitely
    significant). A zero difference has z = 0.
    """
    pt = expand_person_time(data, kind, regime)
    tab = empirical_hazard(pt)
    g = msm_hazard_rows(pt, s)
    f = pt.frame.assign(g=g)
    target = f.groupby("k")["g"].mean().reindex(tab["k"]).to_numpy()
    tab["target"] = target
    with np.errstate(invalid="ignore", divide="ignore"):
        diff = tab["hazard"].to_numpy() - target
        n = tab["at_risk"].to_numpy()
        se = tab["se"].to_numpy()
        se = np.where(se > 0, se, np.sqrt(target * (1 - target) / n))
        z = np.where(np.abs(diff) < 1e-15, 0.0, diff / se)
    tab["z"] = z
    return tab
