import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kmtsim import haar as Hr

GRID = np.arange(0, 2**12 + 1) / 2**12


def test_haar_eval_examples():
    assert Hr.haar_eval(0, 1, 0.25) == 1.0
    assert Hr.haar_eval(0, 1, 0.75) == -1.0
    assert Hr.haar_eval(1, 2, 0.6) == pytest.approx(math.sqrt(2), rel=1e-15)
    assert Hr.haar_eval(None, None, 0.3) == 1.0
    # boundary convention: 0 belongs to the first cell, s_{k,j} to cell j
    assert Hr.haar_eval(0, 1, 0.0) == 1.0
    assert Hr.haar_eval(0, 1, 0.5) == 1.0
    assert Hr.haar_eval(0, 1, 1.0) == -1.0


def test_haar_eval_rejects_bad_input():
    with pytest.raises(ValueError):
        Hr.haar_eval(1, 3, 0.5)
    with pytest.raises(ValueError):
        Hr.haar_eval(-1, 1, 0.5)
    with pytest.raises(ValueError):
        Hr.haar_eval(0, 1, 1.5)


@pytest.mark.parametrize("k", range(6))
def test_haar_integrates_to_zero(k):
    mid = (np.arange(2 ** (k + 1)) + 0.5) / 2 ** (k + 1)
    for j in range(1, 2**k + 1):
        assert abs(np.sum(Hr.haar_eval(k, j, mid))) < 1e-12


def test_orthonormality():
    idx = [(k, j) for k in range(5) for j in range(1, 2**k + 1)]
    for a in idx:
        for b in idx:
            ip = Hr.haar_inner_product(*a, *b)
            assert abs(ip - (1.0 if a == b else 0.0)) <= 1e-12


def test_cells_nest():
    t = np.linspace(0, 1, 2001)
    for k in range(8):
        c = Hr.cell_index(k, t)
        c1 = Hr.cell_index(k + 1, t)
        assert np.all((c1 + 1) // 2 == c)


def test_coeffs_of_identity():
    f = Hr.certify(lambda t: np.asarray(t, dtype=float) - 0.0, 2.0)
    e = Hr.haar_coeffs(f, 4)
    assert e.c0 == pytest.approx(0.5, abs=1e-12)
    assert e.coeffs[0][0] == pytest.approx(-0.25, abs=1e-12)
    # closed form: c_{k,j} = -2^{-3k/2} / 4
    for k in range(4):
        np.testing.assert_allclose(e.coeffs[k], -(2.0 ** (-1.5 * k)) / 4, atol=1e-12)
    assert e.n_coeffs == 2**4 - 1


def test_coeffs_of_constant():
    e = Hr.haar_coeffs(lambda t: np.full_like(np.asarray(t, dtype=float), 0.37), 6)
    assert e.c0 == pytest.approx(0.37, abs=1e-15)
    assert np.max(np.abs(e.all_coeffs())) < 1e-15
    np.testing.assert_allclose(Hr.truncated_eval(e, GRID), 0.37, atol=1e-15)


def test_sqrt_coeff_bound():
    f = Hr.sample_holder(1.0, kind="sqrt")
    e = Hr.haar_coeffs(f, 10)
    for k, c in enumerate(e.coeffs):
        assert np.all(np.abs(c) <= 2**-1.5 * 2.0**-k + 1e-12)


def test_sqrt_coeff_closed_form():
    # c_{k,j} = 2^{k/2} (I(left half) - I(right half)), I(a, b) = (b^1.5 - a^1.5) / 3 for sqrt(t)/2
    f = Hr.sample_holder(1.0, kind="sqrt")
    e = Hr.haar_coeffs(f, 5)
    for k in range(5):
        j = np.arange(1, 2**k + 1)
        a, mid, b = (j - 1) / 2**k, (j - 0.5) / 2**k, j / 2**k
        ref = 2 ** (k / 2) * ((mid**1.5 - a**1.5) - (b**1.5 - mid**1.5)) / 3
        np.testing.assert_allclose(e.coeffs[k], ref, atol=1e-9)


def test_truncation_piecewise_constant_exact():
    m = 5
    vals = np.random.default_rng(3).normal(size=2**m)
    f = lambda t: vals[Hr.cell_index(m, t) - 1]
    e = Hr.haar_coeffs(f, m)
    np.testing.assert_allclose(Hr.truncated_eval(e, GRID), f(GRID), atol=1e-9)


def test_truncation_is_local_average():
    f = Hr.sample_holder(1.0, seed=4, kind="tent_series")
    for m in (2, 5, 8):
        e = Hr.haar_coeffs(f, m)
        np.testing.assert_allclose(Hr.truncated_eval(e, GRID), Hr.local_average(f, m, GRID), atol=1e-12)


def test_sqrt_truncation_gap():
    f = Hr.sample_holder(1.0, kind="sqrt")
    e = Hr.haar_coeffs(f, 6)
    assert np.max(np.abs(f(GRID) - Hr.truncated_eval(e, GRID))) <= 2**-3


def test_sample_holder_examples():
    f = Hr.sample_holder(1.0, seed=0, kind="sqrt")
    assert f.certificate[2] > 0
    np.testing.assert_allclose(f(GRID), np.sqrt(GRID) / 2)
    z = Hr.sample_holder(1.0, seed=0, kind="const")
    assert np.all(z(GRID) == 0.0)
    for kind in ("const", "sqrt", "shifted_sqrt", "cusp", "sine", "tent_series"):
        a = Hr.sample_holder(1.0, seed=11, kind=kind)
        b = Hr.sample_holder(1.0, seed=11, kind=kind)
        assert np.array_equal(a(GRID), b(GRID))


def test_sample_holder_errors():
    with pytest.raises(ValueError):
        Hr.sample_holder(0.0)
    with pytest.raises(ValueError, match="unknown"):
        Hr.sample_holder(1.0, kind="haar_series")
    with pytest.raises(ValueError, match="20 retries"):
        Hr.sample_holder(1.0, kind="const", value=5.0)


def test_certificate_rejects_non_members():
    # Hoelder with constant 1 but sup norm 1 > L/2
    with pytest.raises(ValueError, match="sup norm"):
        Hr.certify(lambda t: np.asarray(t, dtype=float), 1.0)
    # a jump is never Hoelder on a fine grid
    with pytest.raises(ValueError, match="margin"):
        Hr.certify(lambda t: 0.4 * np.sign(np.asarray(t) - 0.5), 1.0)
    h, modulus, margin = Hr.holder_certificate(lambda t: np.sqrt(t) / 2, 1.0)
    assert h == 2.0**-12 and modulus == pytest.approx(0.5) and margin > 0


def test_default_battery_closed_under_negation():
    bat = Hr.default_battery(1.0)
    assert len(bat) == 20
    half = len(bat) // 2
    for f, g in zip(bat[:half], bat[half:]):
        np.testing.assert_array_equal(g(GRID), -f(GRID))
    for f in bat:
        assert f.certificate[2] >= 0
        assert np.max(np.abs(f(GRID))) <= f.holder_constant / 2 + 1e-15


@pytest.mark.parametrize("L", [0.5, 1.0, 3.0])
def test_battery_he_bounds(L):
    for f in Hr.default_battery(L, seed=1):
        e = Hr.haar_coeffs(f, 8)
        assert abs(e.c0) <= L / 2 + 1e-8
        for k, c in enumerate(e.coeffs):
            assert np.all(np.abs(c) <= 2**-1.5 * L * 2.0**-k + 1e-8)
        for m in (2, 4, 6, 8):
            gap = np.max(np.abs(f(GRID) - Hr.truncated_eval(Hr.haar_coeffs(f, m), GRID)))
            assert gap <= L * 2 ** (-m / 2) + 1e-8


def test_parseval_on_span():
    for f in Hr.default_battery(1.0, seed=2)[:10]:
        e = Hr.haar_coeffs(f, 8)
        total = e.c0**2 + np.sum(e.all_coeffs() ** 2)
        l2 = np.sum(Hr.cell_integrals(lambda t: f(t) ** 2, 12))
        assert total <= l2 + 1e-8


def test_battery_specs_and_csv(tmp_path):
    specs = [{"kind": "sine", "seed": 3}, {"kind": "cusp", "seed": 4, "negate": True, "L": 2.0}]
    path = tmp_path / "battery.json"
    import json
    path.write_text(json.dumps(specs))
    fs = Hr.load_battery(path)
    assert [f.kind for f in fs] == ["sine", "cusp"]
    assert fs[1].holder_constant == 2.0
    e = Hr.haar_coeffs(fs[0], 3)
    out = tmp_path / "expansion.csv"
    Hr.write_expansion_csv(e, out)
    rows = out.read_text().strip().splitlines()
    assert rows[0] == "k,j,coefficient" and len(rows) == 2 + 7


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["sqrt", "shifted_sqrt", "cusp", "sine", "tent_series"]),
       st.integers(0, 10**6), st.floats(0.1, 10.0), st.integers(1, 9))
def test_property_generated_functions_obey_he_bounds(kind, seed, L, m):
    f = Hr.sample_holder(L, seed=seed, kind=kind)
    assert f.certificate[2] >= 0
    e = Hr.haar_coeffs(f, m)
    assert abs(e.c0) <= L / 2 + 1e-8
    for k, c in enumerate(e.coeffs):
        assert np.all(np.abs(c) <= 2**-1.5 * L * 2.0**-k + 1e-8)
    gap = np.max(np.abs(f(GRID) - Hr.truncated_eval(e, GRID)))
    assert gap <= L * 2 ** (-m / 2) + 1e-8
