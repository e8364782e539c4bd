import gzip
import json
import os

import numpy as np
import pandas as pd
import pytest

from builders import scenario_text
from msmsim import cli

REF = os.path.join(os.path.dirname(__file__), "..", "scenarios", "reference_gaussian.scn")


def write(tmp_path, text, name="s.scn"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def small(tmp_path, **kw):
    kw.setdefault("K", 3)
    kw.setdefault("m", 100)
    return write(tmp_path, scenario_text(**kw))


def test_simulate_small_reference(tmp_path):
    out = str(tmp_path / "d.csv")
    assert cli.main(["simulate", "--config", REF, "--n", "10", "--seed", "3", "--out", out]) == 0
    f = pd.read_csv(out)
    assert 10 <= len(f) <= 10 * 10
    man = json.loads(open(out + ".manifest.json").read())
    assert man["n"] == 10 and man["seed"] == 3 and man["csv_schema"] == cli.CSV_SCHEMA
    assert man["columns"] == list(f.columns)


def test_bad_rho_is_config_error(tmp_path, capsys):
    cfg = small(tmp_path, copula='family = "gaussian"\nrho = 1.5')
    assert cli.main(["simulate", "--config", cfg, "--n", "5", "--out", str(tmp_path / "d.csv")]) == 2
    err = capsys.readouterr().err
    assert "rho" in err and "line" in err


def test_parse_error_reports_position(tmp_path, capsys):
    cfg = write(tmp_path, "K = 3\n[dims\n")
    assert cli.main(["simulate", "--config", cfg, "--n", "5", "--out", str(tmp_path / "d.csv")]) == 2
    assert "line 2" in capsys.readouterr().err


def test_reruns_are_byte_identical(tmp_path):
    cfg = small(tmp_path)
    a, b = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
    for out in (a, b):
        assert cli.main(["simulate", "--config", cfg, "--n", "25", "--seed", "9", "--out", out]) == 0
    assert open(a, "rb").read() == open(b, "rb").read()


def test_gzip_output(tmp_path):
    cfg = small(tmp_path)
    plain, gz = str(tmp_path / "a.csv"), str(tmp_path / "a.csv.gz")
    assert cli.main(["simulate", "--config", cfg, "--n", "10", "--out", plain]) == 0
    assert cli.main(["simulate", "--config", cfg, "--n", "10", "--out", gz]) == 0
    assert gzip.decompress(open(gz, "rb").read()) == open(plain, "rb").read()


def test_unwritable_output_is_io_error(tmp_path):
    cfg = small(tmp_path)
    out = str(tmp_path / "missing" / "dir" / "d.csv")
    assert cli.main(["simulate", "--config", cfg, "--n", "5", "--out", out]) == 1


def test_missing_config_is_io_error(tmp_path):
    assert cli.main(["simulate", "--config", str(tmp_path / "none.scn"), "--n", "5",
                     "--out", str(tmp_path / "d.csv")]) == 1


def test_extinction_is_simulation_error(tmp_path, capsys):
    cfg = small(tmp_path, link="identity", intercepts=[0.95] * 4, terms=(), m=2)
    assert cli.main(["simulate", "--config", cfg, "--n", "100", "--out", str(tmp_path / "d.csv")]) == 3
    assert "individual" in capsys.readouterr().err


def test_validate_zero_hazard(tmp_path, capsys):
    cfg = small(tmp_path, link="identity", intercepts=[0.0] * 4, terms=())
    assert cli.main(["validate", "--config", cfg, "--n", "50", "--regime", "1"]) == 0
    out = capsys.readouterr().out
    tab = pd.read_csv(pd.io.common.StringIO("\n".join(out.splitlines()[1:])), sep=r"\s+")
    assert (tab["hazard"] == 0).all()


def test_validate_needs_regime(tmp_path):
    assert cli.main(["validate", "--config", small(tmp_path), "--n", "5"]) == 2


def test_validate_bad_regime_length(tmp_path):
    assert cli.main(["validate", "--config", small(tmp_path), "--n", "5", "--regime", "1,0"]) == 2


def test_validate_literal_divisor_fails(tmp_path):
    extra = '[competing]\nvariant = "subdistribution"\nmodel = "bernoulli"\np = "0.9"\n'
    cfg = small(tmp_path, mode="generalised", intercepts=[-2.0] * 4, m=200, extra=extra)
    args = ["validate", "--config", cfg, "--n", "1500", "--regime", "0"]
    assert cli.main(args) == 0
    assert cli.main(args + ["--literal-subdist-divisor"]) == 4


def test_fit_round_trip_and_digest_check(tmp_path, capsys):
    cfg = small(tmp_path, intercepts=[-1.5] * 4)
    out = str(tmp_path / "d.csv")
    assert cli.main(["simulate", "--config", cfg, "--n", "800", "--seed", "2", "--out", out]) == 0
    capsys.readouterr()
    assert cli.main(["fit", "--config", cfg, "--data", out, "--weighted"]) == 0
    text = capsys.readouterr().out
    assert "parameter" in text and "true" in text and "se_robust" in text
    other = small(tmp_path, intercepts=[-1.4] * 4)
    assert cli.main(["fit", "--config", other, "--data", out]) == 2


def test_fit_single_regime_is_rank_deficient(tmp_path, capsys):
    cfg = small(tmp_path, intercepts=[-1.5] * 4)
    out = str(tmp_path / "d.csv")
    assert cli.main(["simulate", "--config", cfg, "--n", "1500", "--regime", "1", "--out", out]) == 0
    capsys.readouterr()
    # under one static regime A[k] is a combination of the visit intercepts
    assert cli.main(["fit", "--config", cfg, "--data", out]) == 5
    assert "rank" in capsys.readouterr().err


def test_fit_separation_exit_code(tmp_path):
    cfg = small(tmp_path, K=1, intercepts=[-3.0, -3.0])
    out = str(tmp_path / "d.csv")
    assert cli.main(["simulate", "--config", cfg, "--n", "4", "--out", out]) == 0
    assert cli.main(["fit", "--config", cfg, "--data", out, "--weighted"]) == 5


def _curves(tmp_path, *args):
    out = str(tmp_path / "c.csv")
    assert cli.main(["curves", *args, "--grid", "99", "--samples", "20000", "--out", out]) == 0
    return pd.read_csv(out)


def test_curves_gaussian_increasing(tmp_path):
    f = _curves(tmp_path, "--family", "gaussian", "--rho", "-0.9", "--g", "0.015,0.025")
    for _, grp in f.groupby("g"):
        assert np.all(np.diff(grp["r"]) > 0)
    assert set(f.columns) == {"g", "u2", "r", "q", "p"}


def test_curves_student_t_non_monotone(tmp_path):
    f = _curves(tmp_path, "--family", "studentt", "--rho", "-0.5", "--eta", "2", "--g", "0.015",
                "--mode", "generalised")
    d = np.diff(f["r"])
    assert (d > 0).any() and (d < 0).any()
    assert np.all(np.diff(f["q"]) >= 0)
    assert np.array_equal(f["p"], f["q"])


def test_curves_independence_constant(tmp_path):
    f = _curves(tmp_path, "--family", "gaussian", "--rho", "0", "--g", "0.5")
    np.testing.assert_allclose(f["r"], 0.5, atol=1e-12)


def test_curves_domain_errors(tmp_path):
    assert cli.main(["curves", "--family", "gaussian", "--rho", "-0.9", "--g", "1.5"]) == 2
    assert cli.main(["curves", "--family", "gaussian", "--rho", "2", "--g", "0.5"]) == 2
    assert cli.main(["curves", "--family", "nope", "--g", "0.5"]) == 2
