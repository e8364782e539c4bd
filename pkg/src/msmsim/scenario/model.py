"""Scenario data model, validation and text serialisation."""

from __future__ import annotations

import enum
import hashlib
import math
import re
from dataclasses import dataclass, field, replace
from typing import Generic, TypeVar

import numpy as np

from ..copula import CopulaSpec, Family
from ..errors import DomainError, EvaluationError, HazardDomainError, ScenarioError
from .config import Section, Value, format_value, parse_config
from .expr import (
    Env,
    Expr,
    compile_expression,
    parse_expression,
    to_source,
    variables,
)

SCHEMA_VERSION = 1
T = TypeVar("T")


class DistKind(str, enum.Enum):
    BERNOULLI = "bernoulli"
    NORMAL = "normal"
    UNIFORM = "uniform"
    CONSTANT = "constant"


_DIST_PARAMS = {
    DistKind.BERNOULLI: ("p",),
    DistKind.NORMAL: ("mean", "sd"),
    DistKind.UNIFORM: ("lo", "hi"),
    DistKind.CONSTANT: ("value",),
}


class Link(str, enum.Enum):
    LOGIT = "logit"
    IDENTITY = "identity"


class Mode(str, enum.Enum):
    EXTENDED = "extended"
    GENERALISED = "generalised"


class Variant(str, enum.Enum):
    SUBDISTRIBUTION = "subdistribution"
    CAUSE_SPECIFIC = "cause_specific"


def _as_array(v):
    return np.asarray(v, dtype=float)


@dataclass(frozen=True)
class DistributionSpec:
    """One of Bernoulli(p), Normal(mean, sd), Uniform(lo, hi), Constant(value).

    Draws per value: Bernoulli, Normal and Uniform consume exactly one number
    from the stream (a uniform, a standard normal and a uniform
    respectively); Constant consumes none.
    """

    kind: DistKind
    params: tuple
    _fns: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        kind = DistKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if len(self.params) != len(_DIST_PARAMS[kind]):
            raise DomainError(f"{kind.value} distribution takes parameters {_DIST_PARAMS[kind]}")
        object.__setattr__(self, "_fns", tuple(compile_expression(p) for p in self.params))

    @classmethod
    def make(cls, kind: str, **params: str | Expr) -> "DistributionSpec":
        kind = DistKind(kind)
        exprs = []
        for name in _DIST_PARAMS[kind]:
            v = params[name]
            exprs.append(parse_expression(v) if isinstance(v, str) else v)
        return cls(kind, tuple(exprs))

    def param_names(self) -> tuple[str, ...]:
        return _DIST_PARAMS[self.kind]

    def _evaluate(self, env: Env):
        with np.errstate(invalid="ignore", divide="ignore"):
            vals = [_as_array(f(env)) for f in self._fns]
        for name, v in zip(self.param_names(), vals):
            if not np.all(np.isfinite(v)):
                raise EvaluationError(f"{self.kind.value} parameter {name} is not finite")
        if self.kind is DistKind.BERNOULLI and not np.all((vals[0] >= 0) & (vals[0] <= 1)):
            raise DomainError("Bernoulli probability outside [0, 1]")
        if self.kind is DistKind.NORMAL and not np.all(vals[1] >= 0):
            raise DomainError("Normal standard deviation is negative")
        if self.kind is DistKind.UNIFORM and not np.all(vals[0] <= vals[1]):
            raise DomainError("Uniform lower bound exceeds upper bound")
        return vals

    def sample(self, env: Env, rng: np.random.Generator, size: int | None = None):
        """Draw ``size`` values (a float when ``size`` is None)."""
        vals = self._evaluate(env)
        shape = () if size is None else (size,)
        if self.kind is DistKind.BERNOULLI:
            out = (rng.random(shape) < vals[0]).astype(float)
        elif self.kind is DistKind.NORMAL:
            out = vals[0] + vals[1] * rng.standard_normal(shape)
        elif self.kind is DistKind.UNIFORM:
            out = vals[0] + (vals[1] - vals[0]) * rng.random(shape)
        else:
            out = np.broadcast_to(vals[0], shape).astype(float)
        if size is None:
            flat = np.asarray(out, dtype=float).ravel()
            if flat.size != 1:
                raise EvaluationError("distribution parameters are not scalar")
            return float(flat[0])
        return np.broadcast_to(out, shape)

    def density(self, value, env: Env):
        """Probability (Bernoulli) or density (Normal/Uniform) of ``value``."""
        vals = self._evaluate(env)
        value = _as_array(value)
        if self.kind is DistKind.BERNOULLI:
            return np.where(value == 1.0, vals[0], 1.0 - vals[0])
        if self.kind is DistKind.NORMAL:
            mean, sd = vals
            with np.errstate(divide="ignore", invalid="ignore"):
                z = (value - mean) / sd
                return np.exp(-0.5 * z * z) / (sd * math.sqrt(2.0 * math.pi))
        if self.kind is DistKind.UNIFORM:
            lo, hi = vals
            inside = (value >= lo) & (value <= hi)
            with np.errstate(divide="ignore"):
                return np.where(inside, 1.0 / (hi - lo), 0.0)
        return np.where(value == vals[0], 1.0, 0.0)


def sample_distribution(d: DistributionSpec, env: Env, rng: np.random.Generator) -> float:
    """One draw from ``d`` evaluated in ``env``."""
    return d.sample(env, rng)


@dataclass(frozen=True)
class PerVisit(Generic[T]):
    """A default value with optional per-visit overrides."""

    default: T
    overrides: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "overrides", tuple(sorted(tuple(self.overrides), key=lambda kv: kv[0])))

    def at(self, k: int) -> T:
        for kk, v in self.overrides:
            if kk == k:
                return v
        return self.default

    def items(self):
        yield from ((None, self.default),)
        yield from self.overrides


@dataclass(frozen=True)
class MsmTerm:
    name: str
    coef: float
    expr: Expr


@dataclass(frozen=True)
class MsmSpec:
    """Structural hazard model ``link^-1(intercept[k] + sum coef * term)``."""

    link: Link
    intercepts: tuple
    terms: tuple = ()
    _fns: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "link", Link(self.link))
        object.__setattr__(self, "intercepts", tuple(float(b) for b in self.intercepts))
        object.__setattr__(self, "terms", tuple(self.terms))
        object.__setattr__(self, "_fns", tuple(compile_expression(t.expr) for t in self.terms))

    @property
    def parameter_names(self) -> list[str]:
        return [f"intercept_{k + 1}" for k in range(len(self.intercepts))] + [t.name for t in self.terms]

    @property
    def coefficients(self) -> np.ndarray:
        return np.array(list(self.intercepts) + [t.coef for t in self.terms])

    def term_values(self, env: Env) -> list:
        return [f(env) for f in self._fns]

    def linear_predictor(self, env: Env):
        lp = self.intercepts[env.k]
        for t, f in zip(self.terms, self._fns):
            lp = lp + t.coef * _as_array(f(env))
        return lp

    def hazard(self, env: Env, strict: bool = True) -> tuple[float, bool]:
        """Return ``(g, clipped)``; identity links outside [0, 1] raise when strict."""
        lp = float(np.asarray(self.linear_predictor(env)).reshape(()))
        if self.link is Link.LOGIT:
            return 1.0 / (1.0 + math.exp(-lp)) if lp > -700 else 0.0, False
        if 0.0 <= lp <= 1.0:
            return lp, False
        if strict:
            raise HazardDomainError(f"identity-link hazard {lp} outside [0, 1] at visit {env.k}")
        return min(max(lp, 0.0), 1.0), True


@dataclass(frozen=True)
class RefreshSpec:
    m_big: int
    threshold: float


@dataclass(frozen=True)
class CompetingSpec:
    """Competing-event configuration.

    ``survival`` is a Bernoulli law for ``Z_{k+1} = 1`` (remaining free of
    the competing event). Alternatively, for cause-specific simulation, the
    competing event can have its own MSM, risk score and copula.
    """

    variant: Variant
    survival: DistributionSpec | None = None
    msm: MsmSpec | None = None
    risk_score: PerVisit | None = None
    copula: CopulaSpec | None = None
    literal_divisor: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))

    @property
    def uses_msm(self) -> bool:
        return self.msm is not None


@dataclass(frozen=True)
class Dims:
    x: int = 0
    b: int = 0
    l: int = 0


@dataclass(frozen=True)
class Scenario:
    """Immutable description of one data-generating mechanism."""

    K: int
    dims: Dims
    baseline_x: tuple
    baseline_b: tuple
    confounders: tuple
    treatment: PerVisit
    risk_score: PerVisit
    msm: MsmSpec
    copula: CopulaSpec
    mode: Mode = Mode.EXTENDED
    m: int = 1000
    strict: bool = True
    refresh: RefreshSpec | None = None
    competing: CompetingSpec | None = None
    intervention: tuple | None = None
    lag_defaults: tuple = ()
    schema_version: int = SCHEMA_VERSION
    _risk_fns: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "_risk_fns", {})
        if self.intervention is not None:
            object.__setattr__(self, "intervention", tuple(float(a) for a in self.intervention))
        object.__setattr__(self, "lag_defaults", tuple(sorted((str(k), float(v)) for k, v in dict(self.lag_defaults).items())))

    @property
    def defaults(self) -> dict[str, float]:
        return dict(self.lag_defaults)

    def risk_fn(self, k: int):
        fn = self._risk_fns.get(k)
        if fn is None:
            fn = compile_expression(self.risk_score.at(k))
            self._risk_fns[k] = fn
        return fn

    def with_overrides(self, **changes) -> "Scenario":
        """Copy with fields replaced; the result is re-validated."""
        out = replace(self, **changes)
        validate_scenario(out)
        return out

    def digest(self) -> str:
        return hashlib.sha256(serialize_scenario(self).encode("utf-8")).hexdigest()


# ------------------------------------------------------------- validation

# (allowed kinds, A lag minimum, L same-visit rule)
_CONTEXTS = {
    "baseline_x": ({"X"}, None),
    "baseline_b": ({"X", "B"}, None),
    "confounder": ({"X", "B", "L", "A", "k"}, 1),
    "treatment": ({"X", "B", "L", "A", "k"}, 1),
    "risk": ({"X", "B", "L", "A", "k"}, 0),
    "msm": ({"X", "A", "k"}, 0),
    "competing": ({"X", "B", "L", "A", "k"}, 0),
}


def check_references(e: Expr, context: str, dims: Dims, index: int | None = None, where=None):
    """Raise :class:`ScenarioError` if ``e`` uses a reference ``context`` forbids.

    ``index`` is the 1-based position of the variable being defined (for
    baseline and confounder laws, which may only use earlier components at
    the same visit). ``where`` is the config :class:`Value` holding the
    expression text, used for positions.
    """
    allowed, a_min_lag = _CONTEXTS[context]
    for v in variables(e):
        def fail(msg):
            raise _located(ScenarioError(msg), where, v.pos)

        if v.kind not in allowed:
            fail(f"{_name(v)} cannot be used in a {context.replace('_', ' ')} expression")
        limit = {"X": dims.x, "B": dims.b, "L": dims.l}.get(v.kind)
        if limit is not None and v.index > limit:
            fail(f"unknown identifier {_name(v)} (only {limit} {v.kind} variable(s) declared)")
        if context == "baseline_x" and v.index >= index:
            fail(f"X{index} may only depend on earlier X components")
        if context == "baseline_b" and v.kind == "B" and v.index >= index:
            fail(f"B{index} may only depend on earlier B components")
        if context == "confounder" and v.kind == "L" and v.lag == 0 and v.index >= index:
            fail(f"L{index}[k] may only depend on current values of earlier L components")
        if v.kind == "A" and a_min_lag is not None and v.lag < a_min_lag:
            fail(f"{_name(v)} is not yet known in a {context} expression; use A[k-1] or earlier")


def _name(v) -> str:
    if v.kind == "k":
        return "k"
    if v.kind in ("X", "B"):
        return f"{v.kind}{v.index}"
    idx = "k" if v.lag == 0 else f"k-{v.lag}"
    return f"A[{idx}]" if v.kind == "A" else f"L{v.index}[{idx}]"


def _located(err: ScenarioError, where: Value | None, offset: int = 0) -> ScenarioError:
    if where is not None and err.line is None:
        err.line = where.line
        err.column = where.column + 1 + offset
    return err


def validate_scenario(s: Scenario) -> None:
    """Structural checks on a programmatically built scenario."""
    if s.schema_version != SCHEMA_VERSION:
        raise ScenarioError(f"unsupported schema_version {s.schema_version}")
    if s.K < 0:
        raise ScenarioError("K must be >= 0")
    if s.m < 2:
        raise ScenarioError("m must be >= 2")
    if len(s.baseline_x) != s.dims.x or len(s.baseline_b) != s.dims.b or len(s.confounders) != s.dims.l:
        raise ScenarioError("number of variable laws does not match declared dims")
    if len(s.msm.intercepts) != s.K + 1:
        raise ScenarioError(f"msm intercept list has length {len(s.msm.intercepts)}, expected K+1 = {s.K + 1}")
    for i, d in enumerate(s.baseline_x, 1):
        for p in d.params:
            check_references(p, "baseline_x", s.dims, i)
    for i, d in enumerate(s.baseline_b, 1):
        for p in d.params:
            check_references(p, "baseline_b", s.dims, i)
    for i, pv in enumerate(s.confounders, 1):
        for _, d in pv.items():
            for p in d.params:
                check_references(p, "confounder", s.dims, i)
    for _, d in s.treatment.items():
        if d.kind not in (DistKind.BERNOULLI, DistKind.NORMAL):
            raise ScenarioError("treatment law must be bernoulli or normal")
        for p in d.params:
            check_references(p, "treatment", s.dims)
    for _, e in s.risk_score.items():
        check_references(e, "risk", s.dims)
    for t in s.msm.terms:
        check_references(t.expr, "msm", s.dims)
    if s.refresh is not None:
        if s.refresh.m_big < s.m:
            raise ScenarioError("refresh m_big must be >= m")
        if not 0.0 < s.refresh.threshold < 1.0:
            raise ScenarioError("refresh threshold must lie in (0, 1)")
    if s.intervention is not None:
        if len(s.intervention) != s.K + 1:
            raise ScenarioError(f"intervention regime has length {len(s.intervention)}, expected K+1 = {s.K + 1}")
    c = s.competing
    if c is not None:
        if c.variant is Variant.SUBDISTRIBUTION and c.survival is None:
            raise ScenarioError("subdistribution competing events need a bernoulli survival law")
        if c.survival is not None:
            if c.survival.kind is not DistKind.BERNOULLI:
                raise ScenarioError("competing-event survival law must be bernoulli")
            check_references(c.survival.params[0], "competing", s.dims)
        if c.survival is None:
            if c.msm is None or c.risk_score is None or c.copula is None:
                raise ScenarioError("competing-event model needs msm, risk_score and copula sections")
            if len(c.msm.intercepts) != s.K + 1:
                raise ScenarioError("competing msm intercept list must have length K+1")
            for t in c.msm.terms:
                check_references(t.expr, "msm", s.dims)
            for _, e in c.risk_score.items():
                check_references(e, "risk", s.dims)


# ---------------------------------------------------------------- parsing


class _Reader:
    """Typed access to one section with positioned errors."""

    def __init__(self, sec: Section | None, path: str):
        self.sec = sec if sec is not None else Section(path)
        self.path = path
        self.used: set[str] = set()

    def err(self, msg: str, key: str | None = None) -> ScenarioError:
        if key is not None and key in self.sec.values:
            v = self.sec.values[key]
            return ScenarioError(msg, v.line, v.column)
        return ScenarioError(msg, self.sec.line or None)

    def has(self, key: str) -> bool:
        return key in self.sec.values

    def raw(self, key: str) -> Value:
        self.used.add(key)
        try:
            return self.sec.values[key]
        except KeyError:
            where = f"[{self.path}]" if self.path else "top level"
            raise ScenarioError(f"missing key {key!r} in {where}", self.sec.line or None) from None

    def get(self, key, kind, default=...):
        if default is not ... and key not in self.sec.values:
            return default
        v = self.raw(key)
        val = v.value
        ok = {
            "int": isinstance(val, int) and not isinstance(val, bool),
            "num": isinstance(val, (int, float)) and not isinstance(val, bool),
            "str": isinstance(val, str),
            "bool": isinstance(val, bool),
            "list": isinstance(val, list),
        }[kind]
        if not ok:
            raise ScenarioError(f"{self._label(key)} must be {_KIND_NAMES[kind]}", v.line, v.column)
        return float(val) if kind == "num" else val

    def expr(self, key: str, context: str, dims: Dims, index=None) -> Expr:
        v = self.raw(key)
        if not isinstance(v.value, str):
            raise ScenarioError(f"{self._label(key)} must be a quoted expression", v.line, v.column)
        try:
            e = parse_expression(v.value)
        except ScenarioError as exc:
            raise ScenarioError(exc.message, v.line, v.column + (exc.column or 1)) from None
        check_references(e, context, dims, index, where=v)
        return e

    def child(self, key: str) -> "_Reader":
        self.used.add(key)
        sub = self.sec.children.get(key)
        return _Reader(sub, f"{self.path}.{key}" if self.path else key)

    def has_child(self, key: str) -> bool:
        return key in self.sec.children

    def finish(self, extra_children=()):
        for key, v in self.sec.values.items():
            if key not in self.used:
                raise ScenarioError(f"unknown key {key!r} in [{self.path or 'top level'}]", v.line, v.column)
        for key, sub in self.sec.children.items():
            if key not in self.used and key not in extra_children:
                raise ScenarioError(f"unknown section [{sub.name}]", sub.line)

    def _label(self, key):
        return f"{self.path}.{key}" if self.path else key


_KIND_NAMES = {"int": "an integer", "num": "a number", "str": "a string", "bool": "true or false", "list": "a list"}
_VISIT = re.compile(r"visit(\d+)")


def _read_dist(r: _Reader, context: str, dims: Dims, index=None) -> DistributionSpec:
    name = r.get("dist", "str")
    try:
        kind = DistKind(name.lower())
    except ValueError:
        raise r.err(f"unknown distribution {name!r} (expected bernoulli, normal, uniform or constant)", "dist") from None
    params = tuple(r.expr(p, context, dims, index) for p in _DIST_PARAMS[kind])
    return DistributionSpec(kind, params)


def _read_per_visit_dist(r: _Reader, context: str, dims: Dims, K: int, index=None) -> PerVisit:
    default = _read_dist(r, context, dims, index)
    overrides = []
    for key in list(r.sec.children):
        m = _VISIT.fullmatch(key)
        if not m:
            continue
        k = int(m.group(1))
        sub = r.child(key)
        if k > K:
            raise ScenarioError(f"override [{sub.path}] refers to visit {k} > K = {K}", sub.sec.line)
        overrides.append((k, _read_dist(sub, context, dims, index)))
        sub.finish()
    r.finish()
    return PerVisit(default, tuple(overrides))


def _read_risk(r: _Reader, dims: Dims, K: int) -> PerVisit:
    default = r.expr("expr", "risk", dims)
    overrides = []
    for key in list(r.sec.values):
        m = _VISIT.fullmatch(key)
        if m:
            k = int(m.group(1))
            if k > K:
                raise r.err(f"override {key} refers to visit {k} > K = {K}", key)
            overrides.append((k, r.expr(key, "risk", dims)))
    r.finish()
    return PerVisit(default, tuple(overrides))


def _read_msm(r: _Reader, dims: Dims, K: int) -> MsmSpec:
    link_name = r.get("link", "str", "logit")
    try:
        link = Link(link_name)
    except ValueError:
        raise r.err(f"unknown link {link_name!r} (expected logit or identity)", "link") from None
    ints = r.get("intercepts", "list")
    if not all(isinstance(b, (int, float)) and not isinstance(b, bool) for b in ints):
        raise r.err("msm intercepts must be numbers", "intercepts")
    if len(ints) != K + 1:
        raise r.err(f"intercept list has length {len(ints)}, expected K+1 = {K + 1}", "intercepts")
    terms = []
    tr = r.child("terms")
    for name in tr.sec.children:
        t = tr.child(name)
        terms.append(MsmTerm(name, t.get("coef", "num"), t.expr("expr", "msm", dims)))
        t.finish()
    tr.finish()
    r.finish()
    return MsmSpec(link, tuple(float(b) for b in ints), tuple(terms))


def _read_copula(r: _Reader) -> CopulaSpec:
    family = r.get("family", "str")
    try:
        fam = Family.parse(family)
    except DomainError as exc:
        raise r.err(str(exc), "family") from None
    kwargs = {}
    for name in ("rho", "eta", "theta"):
        if r.has(name):
            kwargs[name] = r.get(name, "num")
    try:
        spec = CopulaSpec(fam, **kwargs)
    except DomainError as exc:
        bad = next((n for n in ("rho", "eta", "theta") if n in str(exc)), None)
        raise r.err(str(exc), bad) from None
    r.finish()
    return spec


def parse_scenario(text: str) -> Scenario:
    """Parse and validate a scenario document."""
    root = _Reader(parse_config(text), "")
    version = root.get("schema_version", "int")
    if version != SCHEMA_VERSION:
        raise root.err(f"unsupported schema_version {version} (this build reads {SCHEMA_VERSION})", "schema_version")
    K = root.get("K", "int")
    if K < 0:
        raise root.err("K must be >= 0", "K")

    dr = root.child("dims")
    dims = Dims(*(dr.get(n, "int", 0) for n in ("X", "B", "L")))
    for n, v in zip(("X", "B", "L"), (dims.x, dims.b, dims.l)):
        if v < 0:
            raise dr.err(f"dims.{n} must be >= 0", n)
    dr.finish()

    defaults = {}
    defr = root.child("defaults")
    for key in list(defr.sec.values):
        if not re.fullmatch(r"L\d+|A", key):
            raise defr.err(f"defaults may only name L<i> or A, got {key!r}", key)
        if key != "A" and not 1 <= int(key[1:]) <= dims.l:
            raise defr.err(f"unknown identifier {key!r}", key)
        defaults[key] = defr.get(key, "num")
    defr.finish()

    br = root.child("baseline")
    baseline_x, baseline_b = [], []
    for prefix, n, target, ctx in (("X", dims.x, baseline_x, "baseline_x"), ("B", dims.b, baseline_b, "baseline_b")):
        for i in range(1, n + 1):
            if not br.has_child(f"{prefix}{i}"):
                raise ScenarioError(f"missing section [baseline.{prefix}{i}]")
            sub = br.child(f"{prefix}{i}")
            target.append(_read_dist(sub, ctx, dims, i))
            sub.finish()
    br.finish()

    cr = root.child("confounder")
    confounders = []
    for i in range(1, dims.l + 1):
        if not cr.has_child(f"L{i}"):
            raise ScenarioError(f"missing section [confounder.L{i}]")
        confounders.append(_read_per_visit_dist(cr.child(f"L{i}"), "confounder", dims, K, i))
    cr.finish()

    if not root.has_child("treatment"):
        raise ScenarioError("missing section [treatment]")
    treatment = _read_per_visit_dist(root.child("treatment"), "treatment", dims, K)
    for _, d in treatment.items():
        if d.kind not in (DistKind.BERNOULLI, DistKind.NORMAL):
            raise ScenarioError("treatment law must be bernoulli or normal", root.sec.children["treatment"].line)

    if not root.has_child("risk_score"):
        raise ScenarioError("missing section [risk_score]")
    risk = _read_risk(root.child("risk_score"), dims, K)
    if not root.has_child("msm"):
        raise ScenarioError("missing section [msm]")
    msm = _read_msm(root.child("msm"), dims, K)
    if not root.has_child("copula"):
        raise ScenarioError("missing section [copula]")
    copula = _read_copula(root.child("copula"))

    ar = root.child("algorithm")
    mode_name = ar.get("mode", "str", "extended")
    try:
        mode = Mode(mode_name)
    except ValueError:
        raise ar.err(f"unknown mode {mode_name!r} (expected extended or generalised)", "mode") from None
    m = ar.get("m", "int", 1000)
    if m < 2:
        raise ar.err("algorithm.m must be >= 2", "m")
    strict = ar.get("strict", "bool", True)
    refresh = None
    if ar.has_child("refresh"):
        rr = ar.child("refresh")
        refresh = RefreshSpec(rr.get("m_big", "int"), rr.get("threshold", "num"))
        if refresh.m_big < m:
            raise rr.err("refresh m_big must be >= m", "m_big")
        if not 0.0 < refresh.threshold < 1.0:
            raise rr.err("refresh threshold must lie in (0, 1)", "threshold")
        rr.finish()
    ar.finish()

    competing = None
    if root.has_child("competing"):
        competing = _read_competing(root.child("competing"), dims, K)

    intervention = None
    if root.has_child("intervention"):
        ir = root.child("intervention")
        regime = ir.get("regime", "list")
        if not all(isinstance(a, (int, float)) and not isinstance(a, bool) for a in regime):
            raise ir.err("intervention regime must be numbers", "regime")
        if len(regime) != K + 1:
            raise ir.err(f"intervention regime has length {len(regime)}, expected K+1 = {K + 1}", "regime")
        intervention = tuple(float(a) for a in regime)
        ir.finish()
    root.finish()

    s = Scenario(
        K=K,
        dims=dims,
        baseline_x=tuple(baseline_x),
        baseline_b=tuple(baseline_b),
        confounders=tuple(confounders),
        treatment=treatment,
        risk_score=risk,
        msm=msm,
        copula=copula,
        mode=mode,
        m=m,
        strict=strict,
        refresh=refresh,
        competing=competing,
        intervention=intervention,
        lag_defaults=tuple(defaults.items()),
    )
    validate_scenario(s)
    return s


def _read_competing(r: _Reader, dims: Dims, K: int) -> CompetingSpec:
    name = r.get("variant", "str")
    try:
        variant = Variant(name)
    except ValueError:
        raise r.err(f"unknown competing variant {name!r} (expected subdistribution or cause_specific)", "variant") from None
    literal = r.get("literal_divisor", "bool", False)
    model = r.get("model", "str", "bernoulli")
    if model == "bernoulli":
        p = r.expr("p", "competing", dims)
        r.finish()
        return CompetingSpec(variant, survival=DistributionSpec(DistKind.BERNOULLI, (p,)), literal_divisor=literal)
    if model != "msm":
        raise r.err(f"unknown competing model {model!r} (expected bernoulli or msm)", "model")
    if variant is Variant.SUBDISTRIBUTION:
        raise r.err("subdistribution competing events take a bernoulli survival law", "model")
    for sec in ("msm", "risk_score", "copula"):
        if not r.has_child(sec):
            raise ScenarioError(f"missing section [competing.{sec}]", r.sec.line)
    msm = _read_msm(r.child("msm"), dims, K)
    risk = _read_risk(r.child("risk_score"), dims, K)
    cop = _read_copula(r.child("copula"))
    r.finish()
    return CompetingSpec(variant, msm=msm, risk_score=risk, copula=cop, literal_divisor=literal)


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return parse_scenario(fh.read())


# ----------------------------------------------------------- serialising


def _emit_dist(lines: list[str], header: str, d: DistributionSpec):
    lines.append(f"[{header}]")
    lines.append(f"dist = {format_value(d.kind.value)}")
    for name, e in zip(d.param_names(), d.params):
        lines.append(f"{name} = {format_value(to_source(e))}")
    lines.append("")


def _emit_msm(lines: list[str], header: str, msm: MsmSpec):
    lines.append(f"[{header}]")
    lines.append(f"link = {format_value(msm.link.value)}")
    lines.append(f"intercepts = {format_value([float(b) for b in msm.intercepts])}")
    lines.append("")
    for t in msm.terms:
        lines.append(f"[{header}.terms.{t.name}]")
        lines.append(f"coef = {format_value(float(t.coef))}")
        lines.append(f"expr = {format_value(to_source(t.expr))}")
        lines.append("")


def _emit_risk(lines: list[str], header: str, risk: PerVisit):
    lines.append(f"[{header}]")
    lines.append(f"expr = {format_value(to_source(risk.default))}")
    for k, e in risk.overrides:
        lines.append(f"visit{k} = {format_value(to_source(e))}")
    lines.append("")


def _emit_copula(lines: list[str], header: str, c: CopulaSpec):
    lines.append(f"[{header}]")
    lines.append(f"family = {format_value(c.family.value)}")
    for name, v in c.params.items():
        lines.append(f"{name} = {format_value(float(v))}")
    lines.append("")


def serialize_scenario(s: Scenario) -> str:
    """Canonical text form; ``parse_scenario(serialize_scenario(s)) == s``."""
    lines = [f"schema_version = {s.schema_version}", f"K = {s.K}", ""]
    lines += ["[dims]", f"X = {s.dims.x}", f"B = {s.dims.b}", f"L = {s.dims.l}", ""]
    if s.lag_defaults:
        lines.append("[defaults]")
        lines += [f"{k} = {format_value(float(v))}" for k, v in s.lag_defaults]
        lines.append("")
    for i, d in enumerate(s.baseline_x, 1):
        _emit_dist(lines, f"baseline.X{i}", d)
    for i, d in enumerate(s.baseline_b, 1):
        _emit_dist(lines, f"baseline.B{i}", d)
    for i, pv in enumerate(s.confounders, 1):
        _emit_dist(lines, f"confounder.L{i}", pv.default)
        for k, d in pv.overrides:
            _emit_dist(lines, f"confounder.L{i}.visit{k}", d)
    _emit_dist(lines, "treatment", s.treatment.default)
    for k, d in s.treatment.overrides:
        _emit_dist(lines, f"treatment.visit{k}", d)
    _emit_risk(lines, "risk_score", s.risk_score)
    _emit_msm(lines, "msm", s.msm)
    _emit_copula(lines, "copula", s.copula)
    lines += ["[algorithm]", f"mode = {format_value(s.mode.value)}", f"m = {s.m}", f"strict = {format_value(s.strict)}", ""]
    if s.refresh is not None:
        lines += ["[algorithm.refresh]", f"m_big = {s.refresh.m_big}", f"threshold = {format_value(float(s.refresh.threshold))}", ""]
    c = s.competing
    if c is not None:
        lines += ["[competing]", f"variant = {format_value(c.variant.value)}", f"literal_divisor = {format_value(c.literal_divisor)}"]
        if c.survival is not None:
            lines += ['model = "bernoulli"', f"p = {format_value(to_source(c.survival.params[0]))}", ""]
        else:
            lines += ['model = "msm"', ""]
            _emit_msm(lines, "competing.msm", c.msm)
            _emit_risk(lines, "competing.risk_score", c.risk_score)
            _emit_copula(lines, "competing.copula", c.copula)
    if s.intervention is not None:
        lines += ["[intervention]", f"regime = {format_value([float(a) for a in s.intervention])}", ""]
    return "\n".join(lines).rstrip("\n") + "\n"
