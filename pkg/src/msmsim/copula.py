"""Bivariate copula h-functions and quantile-substitution helpers.

``r(u1, u2) = P(U1 <= u1 | U2 = u2)``. In the simulation ``u1`` is the
marginal hazard from the structural model and ``u2`` is a clone's risk
quantile, so ``r`` is that clone's failure probability.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .special import norm_cdf, norm_ppf, t_cdf, t_ppf

EPS = 1e-12


class Family(str, enum.Enum):
    GAUSSIAN = "gaussian"
    STUDENT_T = "studentt"
    CLAYTON = "clayton"
    GUMBEL = "gumbel"
    FRANK = "frank"
    JOE = "joe"

    @classmethod
    def parse(cls, name: str) -> "Family":
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            known = ", ".join(f.value for f in cls)
            raise DomainError(f"unknown copula family {name!r} (expected one of: {known})") from None


_USES = {
    Family.GAUSSIAN: ("rho",),
    Family.STUDENT_T: ("rho", "eta"),
    Family.CLAYTON: ("theta",),
    Family.GUMBEL: ("theta",),
    Family.FRANK: ("theta",),
    Family.JOE: ("theta",),
}


@dataclass(frozen=True)
class CopulaSpec:
    """Copula family plus its association parameters.

    Parameters not used by ``family`` are dropped to ``None`` so that two
    specs describing the same copula compare equal.
    """

    family: Family
    rho: float | None = None
    eta: float | None = None
    theta: float | None = None

    def __post_init__(self):
        fam = self.family if isinstance(self.family, Family) else Family.parse(self.family)
        object.__setattr__(self, "family", fam)
        for name in ("rho", "eta", "theta"):
            if name not in _USES[fam]:
                object.__setattr__(self, name, None)
                continue
            value = getattr(self, name)
            if value is None:
                raise DomainError(f"{fam.value} copula requires parameter {name}")
            value = float(value)
            if not math.isfinite(value):
                raise DomainError(f"copula parameter {name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        self._check_domain()

    def _check_domain(self):
        fam = self.family
        if fam in (Family.GAUSSIAN, Family.STUDENT_T) and not -1.0 < self.rho < 1.0:
            raise DomainError(f"copula parameter rho must lie strictly in (-1, 1), got {self.rho}")
        if fam is Family.STUDENT_T and not self.eta > 0:
            raise DomainError(f"copula parameter eta must be > 0, got {self.eta}")
        if fam is Family.CLAYTON and not self.theta > 0:
            raise DomainError(f"Clayton copula parameter theta must be > 0, got {self.theta}")
        if fam in (Family.GUMBEL, Family.JOE) and not self.theta >= 1:
            raise DomainError(f"{fam.value} copula parameter theta must be >= 1, got {self.theta}")
        if fam is Family.FRANK and self.theta == 0:
            raise DomainError("Frank copula parameter theta must be non-zero")

    @property
    def params(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in _USES[self.family]}

    def h(self, u1, u2) -> np.ndarray:
        """Vectorised h-function with boundary clamping (no domain checks)."""
        u1 = np.asarray(u1, dtype=float)
        u2 = np.asarray(u2, dtype=float)
        if __debug__:
            assert np.all((u1 >= 0) & (u1 <= 1)) and np.all((u2 >= 0) & (u2 <= 1))
        u1 = np.clip(u1, EPS, 1.0 - EPS)
        u2 = np.clip(u2, EPS, 1.0 - EPS)
        out = _H[self.family](self, u1, u2)
        return np.clip(out, 0.0, 1.0)


def _h_gaussian(c: CopulaSpec, u1, u2):
    rho = c.rho
    return norm_cdf((norm_ppf(u1) - rho * norm_ppf(u2)) / math.sqrt(1.0 - rho * rho))


def _h_student(c: CopulaSpec, u1, u2):
    rho, eta = c.rho, c.eta
    z1 = t_ppf(u1, eta)
    z2 = t_ppf(u2, eta)
    scale = np.sqrt((eta + z2 * z2) * (1.0 - rho * rho) / (eta + 1.0))
    return t_cdf((z1 - rho * z2) / scale, eta + 1.0)


def _h_clayton(c: CopulaSpec, u1, u2):
    th = c.theta
    a = -th * np.log(u1)
    b = -th * np.log(u2)
    hi = np.maximum(a, b)
    lo = np.minimum(a, b)
    # log(u1^-th + u2^-th - 1) without overflow
    log_s = hi + np.log1p(np.exp(lo - hi) - np.exp(-hi))
    return np.exp(-(th + 1.0) * np.log(u2) - (1.0 + 1.0 / th) * log_s)


def _h_gumbel(c: CopulaSpec, u1, u2):
    th = c.theta
    x = -np.log(u1)
    y = -np.log(u2)
    log_s = np.logaddexp(th * np.log(x), th * np.log(y))
    s_root = np.exp(log_s / th)
    return np.exp(-s_root + y + (th - 1.0) * np.log(y) + (1.0 / th - 1.0) * log_s)


def _h_frank(c: CopulaSpec, u1, u2):
    th = c.theta
    e1 = np.expm1(-th * u1)
    e2 = np.expm1(-th * u2)
    return np.exp(-th * u2) * e1 / (math.expm1(-th) + e1 * e2)


def _h_joe(c: CopulaSpec, u1, u2):
    th = c.theta
    p = np.exp(th * np.log1p(-u1))
    q = np.exp(th * np.log1p(-u2))
    base = p + q - p * q
    return np.exp((th - 1.0) * np.log1p(-u2) + np.log1p(-p) + (1.0 / th - 1.0) * np.log(base))


_H = {
    Family.GAUSSIAN: _h_gaussian,
    Family.STUDENT_T: _h_student,
    Family.CLAYTON: _h_clayton,
    Family.GUMBEL: _h_gumbel,
    Family.FRANK: _h_frank,
    Family.JOE: _h_joe,
}


class HazardProbability(float):
    """A float constrained to the closed interval [0, 1]."""

    def __new__(cls, value):
        value = float(value)
        if not 0.0 <= value <= 1.0:
            raise DomainError(f"hazard probability must lie in [0, 1], got {value}")
        return super().__new__(cls, value)


def h_function(spec: CopulaSpec, u1, u2):
    """Evaluate the copula h-function ``P(U1 <= u1 | U2 = u2)``.

    Unlike :meth:`CopulaSpec.h`, arguments touching 0 or 1 are rejected.
    Scalar inputs return a :class:`HazardProbability`; array inputs return an
    ndarray.
    """
    a1 = np.asarray(u1, dtype=float)
    a2 = np.asarray(u2, dtype=float)
    for name, arr in (("u1", a1), ("u2", a2)):
        if not np.all((arr > 0.0) & (arr < 1.0)):
            raise DomainError(f"{name} must lie strictly inside (0, 1)")
    out = spec.h(a1, a2)
    if out.ndim == 0:
        return HazardProbability(out)
    return out


def rank_assigned_quantile_map(q_values, ranks) -> np.ndarray:
    """Give the clone with the r-th smallest risk quantile the r-th smallest Q.

    ``ranks`` holds 1-based ranks and must be a permutation of ``1..m``.
    """
    q = np.asarray(q_values, dtype=float)
    r = np.asarray(ranks)
    if q.ndim != 1 or q.size == 0:
        raise DomainError("q_values must be a non-empty 1-d sequence")
    if r.shape != q.shape:
        raise DomainError(f"length mismatch: {q.size} q values, {r.size} ranks")
    if not np.issubdtype(r.dtype, np.integer):
        if not np.all(np.mod(r, 1) == 0):
            raise DomainError("ranks must be integers")
        r = r.astype(np.int64)
    if not np.array_equal(np.sort(r), np.arange(1, q.size + 1)):
        raise DomainError("ranks must be a permutation of 1..m")
    return np.sort(q)[r - 1]


def mc_quantile_oracle(spec: CopulaSpec, u1: float, v, n_samples: int, rng=None):
    """Monte Carlo estimate of the v-th quantile of ``r(u1, U2)``, U2 uniform.

    One set of draws serves every entry of ``v``, so an array ``v`` returns
    a nondecreasing array.
    """
    if n_samples < 1000:
        raise DomainError("n_samples must be at least 1000")
    if not 0.0 < u1 < 1.0:
        raise DomainError("u1 must lie strictly inside (0, 1)")
    v_arr = np.asarray(v, dtype=float)
    if not np.all((v_arr > 0.0) & (v_arr < 1.0)):
        raise DomainError("v must lie strictly inside (0, 1)")
    rng = np.random.default_rng(rng)
    u2 = rng.random(n_samples)
    u2[u2 == 0.0] = 0.5 ** 54
    values = np.sort(spec.h(u1, u2))
    # inverted empirical CDF: smallest order statistic with F_n >= v
    idx = np.ceil(v_arr * n_samples).astype(np.int64) - 1
    out = values[np.clip(idx, 0, n_samples - 1)]
    return float(out) if out.ndim == 0 else out


def quadrature_01(n: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for integrals over (0, 1).

    Gauss-Legendre after the quintic smoothstep substitution
    ``u = t^3 (10 - 15 t + 6 t^2)``, which flattens the endpoint behaviour of
    h-functions whose derivatives blow up at 0 and 1.
    """
    x, w = np.polynomial.legendre.leggauss(n)
    t = 0.5 * (x + 1.0)
    u = t ** 3 * (10.0 - 15.0 * t + 6.0 * t * t)
    du = 30.0 * t * t * (1.0 - t) ** 2
    return u, 0.5 * w * du
