"""Competing-event variants of the clone-ensemble algorithm.

Both variants draw the competing event before failure at every visit.
``Z_{k+1} = 1`` means the individual is still free of the competing event.

* Subdistribution hazard: clones with ``Z = 0`` stay in the ensemble, never
  fail and may serve as donors. Failure probabilities of eligible clones are
  rescaled so that, averaged over the whole risk set (including clones with
  a prior competing event), the hazard equals the MSM value.
* Cause-specific hazard: clones with ``Z = 0`` are treated like failures at
  the matching step and replaced by donors with ``Y = Z = 1``.
"""

from __future__ import annotations

import numpy as np

from .engine import (
    IndividualPath,
    _broadcast,
    _Hooks,
    failure_probabilities,
    rank_quantiles,
    simulate_individual,
)
from .errors import DomainError, InfeasibleHazardError
from .rng import Purpose, StreamFactory
from .scenario.expr import compile_expression
from .scenario.model import Scenario, Variant

# "hazard": evaluate r(g / d, U), always feasible when g <= d and exact in
# expectation; "probability": r(g, U) / d, infeasible once r(g, U) > d.
RESCALES = ("hazard", "probability")


def _survival_draw(s: Scenario, ens, env, k: int, streams: StreamFactory) -> np.ndarray:
    """``Z_{k+1}`` for every clone from the Bernoulli law, given ``Z_k``."""
    c = s.competing
    zk = ens.alive
    stay = c.survival.sample(env, streams.stream(k, Purpose.COMPETING), size=ens.m)
    return zk & (np.asarray(stay) == 1.0)


class _SubdistributionHooks(_Hooks):
    has_z = True

    def __init__(self, literal: bool, rescale: str = "hazard"):
        if rescale not in RESCALES:
            raise DomainError(f"unknown rescale {rescale!r} (expected one of {RESCALES})")
        self.literal = literal
        self.rescale = rescale

    def competing_step(self, s, ens, env, k, streams):
        return _survival_draw(s, ens, env, k, streams)

    def failure_probs(self, s, g, u, ranks, n_eligible, m):
        # Averaged over eligible clones r(g, U) has mean g; the subdistribution
        # risk set is all m clones, so probabilities must be scaled by m / n_e.
        frac = n_eligible / m
        divisor = 1.0 - frac if self.literal else frac
        if n_eligible == m:
            return failure_probabilities(s.copula, s.mode, g, u, ranks)
        if self.literal:
            if divisor <= 0.0:
                return np.ones(u.size)
            p = failure_probabilities(s.copula, s.mode, g, u, ranks) / divisor
            return np.minimum(p, 1.0)
        if self.rescale == "probability":
            p = failure_probabilities(s.copula, s.mode, g, u, ranks) / divisor
            if p.max() > 1.0 and s.strict:
                raise InfeasibleHazardError(
                    f"infeasible subdistribution hazard: rescaled probability {p.max():.4g} exceeds 1"
                )
            return np.minimum(p, 1.0)
        g_star = g / divisor
        if g_star > 1.0:
            raise InfeasibleHazardError(
                f"infeasible subdistribution hazard: g = {g:.4g} exceeds the eligible fraction {frac:.4g}"
            )
        return failure_probabilities(s.copula, s.mode, g_star, u, ranks)

    def needs_replacing(self, failed, ens):
        return failed

    def donors(self, failed, ens):
        return ~failed


class _CauseSpecificHooks(_Hooks):
    has_z = True

    def __init__(self, s: Scenario):
        c = s.competing
        self.msm = c.msm
        self.risk = c.risk_score
        self.copula = c.copula
        self._risk_fns = {}

    def _risk_fn(self, k):
        fn = self._risk_fns.get(k)
        if fn is None:
            fn = self._risk_fns[k] = compile_expression(self.risk.at(k))
        return fn

    def competing_step(self, s, ens, env, k, streams):
        if self.msm is None:
            return _survival_draw(s, ens, env, k, streams)
        # the risk-score, quantile and failure steps, rerun for the competing event
        m = ens.m
        h = _broadcast(self._risk_fn(k)(env), m)
        g, _ = self.msm.hazard(env, strict=s.strict)
        u, ranks = rank_quantiles(
            h, streams.stream(k, Purpose.COMPETING_JITTER), streams.stream(k, Purpose.COMPETING_TIES)
        )
        q = failure_probabilities(self.copula, s.mode, g, u, ranks)
        v = streams.stream(k, Purpose.COMPETING).random(m)
        return ~(v < q)

    def needs_replacing(self, failed, ens):
        return failed | ~ens.alive

    def donors(self, failed, ens):
        return ~failed & ens.alive


def run_subdistribution_individual(
    s: Scenario, streams: StreamFactory, regime=None, literal_divisor=None, rescale: str = "hazard"
) -> IndividualPath:
    """One path under a subdistribution-hazard MSM.

    The eligible fraction ``d = n_e / m`` is divided out by evaluating the
    h-function at ``g / d`` (``rescale="hazard"``), or by dividing the
    probabilities ``r(g, U) / d`` (``rescale="probability"``, which raises
    :class:`InfeasibleHazardError` in strict mode whenever a value passes 1
    and is clipped otherwise). ``literal_divisor=True`` divides ``r(g, U)``
    by ``1 - d`` instead, clipped at 1; it does not reproduce the MSM.
    """
    c = s.competing
    if c is None or c.variant is not Variant.SUBDISTRIBUTION:
        raise DomainError("scenario is not configured for the subdistribution variant")
    if c.survival is None:
        raise DomainError("the subdistribution variant needs a Bernoulli survival law")
    literal = c.literal_divisor if literal_divisor is None else bool(literal_divisor)
    return simulate_individual(s, streams, regime, _SubdistributionHooks(literal, rescale))


def run_causespecific_individual(s: Scenario, streams: StreamFactory, regime=None) -> IndividualPath:
    """One path under a cause-specific-hazard MSM."""
    c = s.competing
    if c is None or c.variant is not Variant.CAUSE_SPECIFIC:
        raise DomainError("scenario is not configured for the cause-specific variant")
    return simulate_individual(s, streams, regime, _CauseSpecificHooks(s))

