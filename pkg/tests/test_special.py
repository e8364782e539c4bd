"""Normal and Student-t CDF/quantile against mpmath at 30 digits."""

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from msmsim.special import norm_cdf, norm_ppf, t_cdf, t_pdf, t_ppf

mp.mp.dps = 30

DOFS = [1, 2, 3, 4, 5, 7, 10, 30, 31, 100, 2.5]





@pytest.mark.parametrize("x", [-8.0, -2.3, -0.5, 0.0, 0.1, 1.7, 5.0])
def test_norm_cdf(x):
    assert abs(norm_cdf(x) - float(mp.ncdf(x))) < 1e-15


@pytest.mark.parametrize("u", [1e-12, 1e-6, 0.025, 0.3, 0.5, 0.77, 0.95, 1 - 1e-9])
def test_norm_ppf(u):
    assert abs(norm_ppf(u) - float(oracles.norm_ppf(u))) < 1e-9 * max(1.0, abs(float(oracles.norm_ppf(u))))


@pytest.mark.parametrize("nu", DOFS)
@pytest.mark.parametrize("x", [-40.0, -6.0, -1.3, -0.2, 0.0, 0.4, 2.0, 9.0])
def test_t_cdf_matches_oracle(nu, x):
    assert abs(float(t_cdf(x, nu)) - float(oracles.t_cdf(x, nu))) < 1e-12


@pytest.mark.parametrize("nu", DOFS)
@pytest.mark.parametrize("u", [1e-10, 1e-4, 0.015, 0.2, 0.5, 0.63, 0.98, 1 - 1e-7])
def test_t_ppf_matches_oracle(nu, u):
    ref = float(oracles.t_ppf(u, nu))
    assert abs(float(t_ppf(u, nu)) - ref) < 1e-9 * max(1.0, abs(ref))


@pytest.mark.parametrize("nu", [1, 2, 5, 30])
def test_t_pdf_matches_oracle(nu):
    x = 0.7
    ref = mp.gamma((nu + 1) / mp.mpf(2)) / (mp.sqrt(nu * mp.pi) * mp.gamma(nu / mp.mpf(2))) * (1 + mp.mpf(x) ** 2 / nu) ** (-(nu + 1) / mp.mpf(2))
    assert abs(float(t_pdf(x, nu)) - float(ref)) < 1e-14


def test_vectorised_shapes():
    u = np.linspace(0.01, 0.99, 7)
    assert t_ppf(u, 3).shape == u.shape
    assert t_cdf(t_ppf(u, 3), 3) == pytest.approx(u, abs=1e-13)


@settings(max_examples=200, deadline=None)
@given(u=st.floats(1e-9, 1 - 1e-9), nu=st.sampled_from([1, 2, 3, 4, 6, 9, 40]))
def test_t_round_trip(u, nu):
    assert float(t_cdf(t_ppf(u, nu), nu)) == pytest.approx(u, abs=1e-12)
