import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from parahom.tensor_algebra import (CoefficientField, binomial_factor, check_ellipticity,
                                    enumerate_multiindices, sub_multiindices)

from conftest import travelling


def test_enumeration_examples():
    assert list(enumerate_multiindices(2, 2)) == [(2, 0), (1, 1), (0, 2)]
    assert list(enumerate_multiindices(1, 3)) == [(3,)]
    assert enumerate_multiindices(3, 2).count == 6


@pytest.mark.parametrize("d", [1, 2, 3, 4])
@pytest.mark.parametrize("m", [1, 2, 3])
def test_enumeration_count_and_order(d, m):
    iset = enumerate_multiindices(d, m)
    assert iset.count == math.comb(m + d - 1, d - 1)
    assert len(set(iset)) == iset.count
    assert all(sum(a) == m for a in iset)
    assert list(iset) == sorted(iset, reverse=True)


@pytest.mark.parametrize("d, m", [(0, 1), (1, 0)])
def test_enumeration_rejects_degenerate(d, m):
    with pytest.raises(ValueError):
        enumerate_multiindices(d, m)


def test_binomial_examples():
    assert binomial_factor((2, 0), (1, 0)) == 2
    assert binomial_factor((2, 2), (0, 0)) == 1
    assert binomial_factor((2, 1), (1, 1)) == 2
    with pytest.raises(ValueError):
        binomial_factor((1, 0), (0, 1))


@given(st.lists(st.integers(0, 4), min_size=1, max_size=3).filter(lambda g: sum(g) <= 4))
def test_vandermonde_sum(gamma):
    gamma = tuple(gamma)
    assert sum(binomial_factor(gamma, z) for z in sub_multiindices(gamma)) == 2 ** sum(gamma)


def test_identity_is_certified():
    A = CoefficientField.constant(np.eye(3), 2, 2, 1.0)
    cert = check_ellipticity(A)
    assert cert.certified
    assert cert.form_min == pytest.approx(1.0, abs=1e-14)


def test_travelling_wave_minimum():
    cert = check_ellipticity(travelling(1))
    assert cert.certified
    assert cert.form_min == pytest.approx(1.0, abs=1e-12)
    assert cert.max_norm == pytest.approx(3.0, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_flipped_mode_is_rejected(seed):
    # random elliptic 2x2 tensor, then flip the sign of its mean until a dense scan sees a violation
    rng = np.random.default_rng(seed)
    modes = [dict(alpha=(1, 0), beta=(1, 0), i=0, j=0, k=(0, 0, 0), re=1.0),
             dict(alpha=(0, 1), beta=(0, 1), i=0, j=0, k=(0, 0, 0), re=1.0)]
    amp = rng.uniform(0.6, 0.9)
    modes.append(dict(alpha=(1, 0), beta=(1, 0), i=0, j=0, k=(1, 0, 1), re=amp / 2))
    flipped = [dict(r) for r in modes]
    flipped[0]["re"] = -0.1
    A = CoefficientField.from_modes(2, 1, 1, 0.05, flipped)
    cert = check_ellipticity(A, grid_res=16)
    assert not cert.certified
    w = cert.witness
    assert w["kind"] == "form"
    # independent check at the reported point and direction
    y, s = np.array(w["point"][:2]), w["point"][2]
    M = A.evaluate(y[None], s)[:, :, 0, 0, 0]
    xi = np.array(w["xi"])
    assert xi @ M @ xi == pytest.approx(w["value"], abs=1e-10)
    assert xi @ M @ xi < A.mu


@given(st.integers(-3, 3), st.integers(-3, 3))
def test_certificate_is_lattice_invariant(z, t):
    A = travelling(1)
    a, b = check_ellipticity(A), check_ellipticity(A.shifted([z], t))
    assert a.form_min == pytest.approx(b.form_min, abs=1e-12)
    assert a.max_norm == pytest.approx(b.max_norm, abs=1e-12)


def test_hermitian_completion_and_real_values():
    A = travelling(2)
    y = np.linspace(0, 1, 7)
    vals = A.evaluate(y, 0.3)[0, 0, 0, 0]
    assert np.allclose(vals, 2 + np.sin(2 * np.pi * (y + 0.3)), atol=1e-14)


def test_non_hermitian_data_rejected():
    with pytest.raises(ValueError):
        CoefficientField(1, 1, 1, 1.0, np.array([[1, 0]]), np.ones((1, 1, 1, 1, 1), dtype=complex))


def test_json_roundtrip():
    A = travelling(2)
    B = CoefficientField.from_json(A.to_json())
    assert np.array_equal(A.wavenumbers, B.wavenumbers)
    assert np.allclose(A.coefficients, B.coefficients)


def test_adjoint_and_reflection():
    A = travelling(1)
    R = A.reflected_time(0.25)
    y = np.linspace(0, 1, 5)
    assert np.allclose(R.evaluate(y, 0.1), A.evaluate(y, 0.25 - 0.1), atol=1e-14)
    assert np.allclose(A.adjoint().adjoint().coefficients, A.coefficients)
