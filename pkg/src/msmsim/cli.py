"""Command-line interface: ``msmsim simulate | validate | fit | curves``.

Exit codes: 0 ok, 1 I/O error, 2 configuration error, 3 simulation error,
4 validation failure, 5 fit failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import gzip
import io
import json
import os
import sys
import tempfile
import time
from datetime import datetime, timezone

import numpy as np
import pandas as pd

from . import __version__
from .copula import CopulaSpec, Family, mc_quantile_oracle
from .engine import PanelDataset, default_workers, simulate_cohort
from .errors import DomainError, FitError, ScenarioError, SimulationError
from .estimate import expand_person_time, fit_msm, hazard_check, stabilized_weights
from .scenario.model import Mode, Scenario, Variant, load_scenario

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_SIMULATION, EXIT_VALIDATION, EXIT_FIT = 0, 1, 2, 3, 4, 5
CSV_SCHEMA = "msmsim-panel-csv/1"
Z_LIMIT = 4.0


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@dataclasses.dataclass
class RunManifest:
    """Provenance record written next to every output file."""

    scenario_digest: str
    config_digest: str
    seed: int
    n: int
    workers: int
    tool_version: str
    started_utc: str
    seconds: float
    outputs: list
    csv_schema: str = CSV_SCHEMA
    columns: list = dataclasses.field(default_factory=list)
    overrides: dict = dataclasses.field(default_factory=dict)
    regime: list | None = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"


def manifest_path(out: str) -> str:
    return out + ".manifest.json"


def _atomic_write(path: str, data: bytes):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=d)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_bytes(frame: pd.DataFrame, gz: bool) -> bytes:
    buf = io.StringIO()
    frame.to_csv(buf, index=False, lineterminator="\n")
    raw = buf.getvalue().encode("utf-8")
    # mtime=0 keeps gzip output reproducible
    return gzip.compress(raw, mtime=0) if gz else raw


# ------------------------------------------------------------ helpers


def _load(args) -> tuple[Scenario, Scenario, dict]:
    try:
        base = load_scenario(args.config)
    except OSError as exc:
        raise CliError(f"cannot read config {args.config}: {exc.strerror or exc}", EXIT_IO) from None
    except UnicodeDecodeError as exc:
        raise CliError(f"{args.config}: not UTF-8 text ({exc.reason})", EXIT_CONFIG) from None
    except (ScenarioError, DomainError) as exc:
        raise CliError(f"{args.config}: {exc}", EXIT_CONFIG) from None
    overrides = {}
    s = base
    if getattr(args, "mode", None):
        s = s.with_overrides(mode=Mode(args.mode))
        overrides["mode"] = args.mode
    if getattr(args, "literal_subdist_divisor", False):
        if s.competing is None or s.competing.variant is not Variant.SUBDISTRIBUTION:
            raise CliError("--literal-subdist-divisor needs a subdistribution competing-event config", EXIT_CONFIG)
        s = s.with_overrides(competing=dataclasses.replace(s.competing, literal_divisor=True))
        overrides["literal_subdist_divisor"] = True
    return base, s, overrides


def _parse_regime(text: str | None, s: Scenario):
    if text is None:
        return None
    try:
        vals = [float(v) for v in text.replace(" ", "").split(",") if v != ""]
    except ValueError:
        raise CliError(f"--regime must be a number or comma-separated numbers, got {text!r}", EXIT_CONFIG) from None
    if len(vals) == 1:
        vals = vals * (s.K + 1)
    if len(vals) != s.K + 1:
        raise CliError(f"--regime has {len(vals)} values, expected K+1 = {s.K + 1}", EXIT_CONFIG)
    return vals


def _kind(s: Scenario) -> str:
    if s.competing is None:
        return "plain"
    return s.competing.variant.value


def _workers(args) -> int:
    w = default_workers() if args.workers is None else args.workers
    if w < 1:
        raise CliError("--workers must be >= 1", EXIT_CONFIG)
    return w


def _simulate(s, n, seed, workers, regime) -> PanelDataset:
    try:
        return simulate_cohort(s, n, seed, workers, regime=regime)
    except SimulationError as exc:
        raise CliError(f"simulation failed: {exc}", EXIT_SIMULATION) from None
    except DomainError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None


# ------------------------------------------------------------ commands


def cmd_simulate(args) -> int:
    base, s, overrides = _load(args)
    regime = _parse_regime(args.regime, s)
    workers = _workers(args)
    if args.n < 1:
        raise CliError("--n must be >= 1", EXIT_CONFIG)
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    t0 = time.perf_counter()
    ds = _simulate(s, args.n, args.seed, workers, regime)
    gz = args.gzip or args.out.endswith(".gz")
    data = _csv_bytes(ds.frame, gz)
    seconds = time.perf_counter() - t0
    man = RunManifest(
        scenario_digest=s.digest(),
        config_digest=base.digest(),
        seed=args.seed,
        n=args.n,
        workers=workers,
        tool_version=__version__,
        started_utc=started,
        seconds=round(seconds, 3),
        outputs=[os.path.abspath(args.out)],
        columns=list(ds.frame.columns),
        overrides=overrides,
        regime=regime,
    )
    try:
        _atomic_write(args.out, data)
        _atomic_write(manifest_path(args.out), man.to_json().encode("utf-8"))
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc.strerror or exc}", EXIT_IO) from None
    print(f"wrote {len(ds.frame)} rows for {args.n} individuals to {args.out} ({seconds:.1f} s)", file=sys.stderr)
    return EXIT_OK


def cmd_validate(args) -> int:
    _, s, _ = _load(args)
    regime = _parse_regime(args.regime, s)
    if regime is None:
        regime = s.intervention
    if regime is None:
        raise CliError("validate needs --regime (or an [intervention] section)", EXIT_CONFIG)
    ds = _simulate(s, args.n, args.seed, _workers(args), regime)
    kind = _kind(s)
    tab = hazard_check(ds, s, kind, regime=regime)
    out = tab[["k", "at_risk", "events", "hazard", "target", "se", "z"]]
    print(f"# {kind} hazard under regime {','.join(f'{a:g}' for a in regime)}; n={args.n}, seed={args.seed}")
    print(out.to_string(index=False, float_format=lambda v: f"{v:.5f}"))
    z = out["z"].to_numpy()
    bad = ~(np.abs(np.nan_to_num(z, nan=0.0)) < Z_LIMIT)
    if args.out:
        try:
            _atomic_write(args.out, out.to_csv(index=False, lineterminator="\n").encode("utf-8"))
        except OSError as exc:
            raise CliError(f"cannot write {args.out}: {exc.strerror or exc}", EXIT_IO) from None
    if bad.any():
        ks = ", ".join(str(int(k)) for k in out["k"][bad])
        print(f"FAIL: |z| >= {Z_LIMIT:g} at visit(s) {ks}", file=sys.stderr)
        return EXIT_VALIDATION
    print(f"OK: all |z| < {Z_LIMIT:g}", file=sys.stderr)
    return EXIT_OK


def cmd_fit(args) -> int:
    base, s, _ = _load(args)
    mpath = args.manifest or manifest_path(args.data)
    try:
        with open(mpath, encoding="utf-8") as fh:
            man = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read manifest {mpath}: {exc.strerror or exc}", EXIT_IO) from None
    except json.JSONDecodeError as exc:
        raise CliError(f"manifest {mpath} is not valid JSON: {exc}", EXIT_IO) from None
    if man.get("config_digest") != base.digest():
        raise CliError(
            f"scenario digest mismatch: {args.data} was simulated from {man.get('config_digest', '?')[:12]}, "
            f"{args.config} has {base.digest()[:12]}",
            EXIT_CONFIG,
        )
    try:
        ds = PanelDataset.from_csv(args.data, s.dims, s.K)
    except OSError as exc:
        raise CliError(f"cannot read {args.data}: {exc.strerror or exc}", EXIT_IO) from None
    except (DomainError, pd.errors.ParserError) as exc:
        raise CliError(f"{args.data}: malformed dataset: {exc}", EXIT_IO) from None
    regime = man.get("regime")
    if regime is not None:
        # counterfactual data: weights are identically 1
        s = s.with_overrides(intervention=tuple(regime))
    try:
        w = stabilized_weights(ds, s, args.denominator) if args.weighted else None
        pt = expand_person_time(ds, _kind(s), regime=regime, weights=w)
        res = fit_msm(pt, s, use_weights=args.weighted)
    except FitError as exc:
        raise CliError(f"fit failed: {exc}", EXIT_FIT) from None
    tab = res.table(s.msm.coefficients)
    se = tab["se_robust"] if args.weighted else tab["se_model"]
    out = pd.DataFrame({"parameter": tab["parameter"], "true": tab["true"], "estimate": tab["estimate"], "se": se,
                        "se_model": tab["se_model"], "se_robust": tab["se_robust"]})
    label = "weighted" if args.weighted else "unweighted"
    print(f"# {label} pooled logistic fit, {len(pt)} person-visits, {res.iterations} iterations, loglik {res.loglik:.4f}")
    print(out.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return EXIT_OK


def cmd_curves(args) -> int:
    try:
        spec = CopulaSpec(Family.parse(args.family), rho=args.rho, eta=args.eta, theta=args.theta)
    except DomainError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    try:
        gs = [float(v) for v in args.g.split(",")]
    except ValueError:
        raise CliError(f"--g must be comma-separated numbers, got {args.g!r}", EXIT_CONFIG) from None
    if not all(0.0 < g < 1.0 for g in gs):
        raise CliError("--g values must lie strictly inside (0, 1)", EXIT_CONFIG)
    if args.grid < 2:
        raise CliError("--grid must be >= 2", EXIT_CONFIG)
    if args.samples < 1000:
        raise CliError("--samples must be >= 1000", EXIT_CONFIG)
    u2 = (np.arange(args.grid) + 0.5) / args.grid
    rng = np.random.default_rng(args.seed)
    parts = []
    for g in gs:
        r = spec.h(g, u2)
        q = mc_quantile_oracle(spec, g, u2, args.samples, rng)
        p = q if args.mode == Mode.GENERALISED.value else r
        parts.append(pd.DataFrame({"g": g, "u2": u2, "r": r, "q": q, "p": p}))
    frame = pd.concat(parts, ignore_index=True)
    text = frame.to_csv(index=False, lineterminator="\n")
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        try:
            _atomic_write(args.out, text.encode("utf-8"))
        except OSError as exc:
            raise CliError(f"cannot write {args.out}: {exc.strerror or exc}", EXIT_IO) from None
    return EXIT_OK


# -------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msmsim", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, need_n=True):
        sp.add_argument("--config", required=True, help="scenario file")
        sp.add_argument("--mode", choices=[m.value for m in Mode], help="override the scenario's algorithm mode")
        sp.add_argument("--literal-subdist-divisor", action="store_true",
                        help="divide by 1 - (eligible fraction), reproducing the uncorrected formula")
        if need_n:
            sp.add_argument("--n", type=int, required=True, help="number of individuals")
            sp.add_argument("--seed", type=int, default=1)
            sp.add_argument("--workers", type=int, default=None,
                            help="worker processes (default: $MSMSIM_WORKERS or 1)")
            sp.add_argument("--regime", help="static regime: one value for every visit or K+1 comma-separated values")

    sp = sub.add_parser("simulate", help="simulate a cohort and write it as CSV")
    common(sp)
    sp.add_argument("--out", required=True, help="output CSV path (.gz compresses)")
    sp.add_argument("--gzip", action="store_true", help="gzip the CSV")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("validate", help="check counterfactual hazards against the MSM")
    common(sp)
    sp.add_argument("--out", help="also write the table as CSV")
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("fit", help="fit the MSM to a simulated dataset")
    common(sp, need_n=False)
    sp.add_argument("--data", required=True, help="CSV written by 'simulate'")
    sp.add_argument("--manifest", help="manifest path (default: <data>.manifest.json)")
    sp.add_argument("--weighted", action="store_true", help="use stabilized IPT weights")
    sp.add_argument("--denominator", choices=["true", "fitted"], default="true",
                    help="weight denominator: the scenario's treatment law or a fitted model")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("curves", help="emit h-function and quantile curves")
    sp.add_argument("--family", required=True, help="|".join(f.value for f in Family))
    sp.add_argument("--rho", type=float)
    sp.add_argument("--eta", type=float)
    sp.add_argument("--theta", type=float)
    sp.add_argument("--g", required=True, help="comma-separated hazard values in (0, 1)")
    sp.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.EXTENDED.value,
                    help="which curve the p column repeats: r (extended) or q (generalised)")
    sp.add_argument("--grid", type=int, default=199, help="number of u2 grid points")
    sp.add_argument("--samples", type=int, default=100_000, help="Monte Carlo draws for q")
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--out", help="output CSV (default stdout)")
    sp.set_defaults(func=cmd_curves)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"msmsim {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except ScenarioError as exc:
        print(f"msmsim {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
