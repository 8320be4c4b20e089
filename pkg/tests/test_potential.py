import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idla_lab.potential import (
    LAMBDA_CLASSICAL, Direction, OutOfTable, PotentialKernel, PotentialTable, check_level_set_inclusion,
    c_profile, dir_derivative, dyadic_angles, estimate_c, exact_potential, fit_lambda, monte_carlo_potential,
    remainder, required_R0prime, truncated_potential,
)

EAST = Direction(1.0, 0.0)


def test_small_values(table150):
    g = table150
    assert g(0, 0) == 0.0
    assert g(1, 0) == pytest.approx(1.0, abs=1e-14)
    assert g(1, 1) == pytest.approx(4 / math.pi, abs=1e-14)
    # independent oracle: truncated series with a million steps
    assert truncated_potential((1, 1), 10**6) == pytest.approx(4 / math.pi, abs=1e-5)
    assert truncated_potential((2, 0), 10**6) == pytest.approx(float(g(2, 0)), abs=1e-5)


def test_diagonal_closed_form(table150):
    for n in (1, 2, 7, 40, 150):
        closed = 4 / math.pi * sum(1 / (2 * k - 1) for k in range(1, n + 1))
        assert table150(n, n) == pytest.approx(closed, rel=1e-13)


def test_harmonicity(table150):
    off, at0 = table150.harmonicity_residual()
    assert off <= 1e-12 and at0 <= 1e-12


def test_symmetry(table150):
    v = table150.values
    assert np.array_equal(v, v[::-1]) and np.array_equal(v, v[:, ::-1]) and np.array_equal(v, v.T)


def test_monotone_on_axis(table150):
    assert np.all(np.diff(table150.values[150:, 150]) > 0)


def test_input_checks():
    with pytest.raises(ValueError):
        exact_potential(1)
    with pytest.raises(ValueError):
        exact_potential(10**6)
    with pytest.raises(TypeError):
        exact_potential(2.5)


def test_out_of_table(table150):
    with pytest.raises(OutOfTable):
        table150(151, 0)
    with pytest.raises(OutOfTable):
        dir_derivative(table150, EAST, (-150, 0))


def test_fit_lambda(table150, table400):
    p = fit_lambda(table150)
    assert 1.02 <= p.lam <= 1.04
    assert p.lam == pytest.approx(LAMBDA_CLASSICAL, abs=1e-6)
    assert p.C1 <= 1
    X, Y = table150.coords
    R = np.hypot(X, Y)
    band = (R >= 2) & (R <= 150)
    assert np.all(R[band] ** 2 * np.abs(remainder(table150, p.lam)[band]) <= p.C1 * (1 + 1e-12))
    half = np.abs(R - 75) < 0.5
    assert np.all(np.abs(remainder(table150, p.lam)[half]) <= 4 * p.C1 / 150**2)
    assert abs(fit_lambda(exact_potential(300)).lam - p.lam) <= 10 / 150**2
    with pytest.raises(ValueError):
        fit_lambda(exact_potential(20))


def test_monte_carlo_consistency(table150):
    rng = np.random.default_rng(5)
    sites = rng.integers(-6, 7, size=(20, 2))
    mean, se = monte_carlo_potential(sites, 20000, 2000, seed=7)
    assert np.all(np.abs(mean - table150(sites)) <= 3 * se + 1e-12)


def test_dir_derivative_examples(table150):
    assert dir_derivative(table150, EAST, (1, 0)) == pytest.approx(-1.0)
    assert dir_derivative(table150, EAST, (-1, 0)) > 0
    n = Direction.from_angle(0.4)
    grid = np.zeros((41, 41))
    for i, x in enumerate(range(-20, 21)):
        for j, y in enumerate(range(-20, 21)):
            grid[i, j] = dir_derivative(table150, n, (x, y))
    lap = 0.25 * (grid[2:, 1:-1] + grid[:-2, 1:-1] + grid[1:-1, 2:] + grid[1:-1, :-2]) - grid[1:-1, 1:-1]
    for z in ((0, 0), (1, 0), (1, 1)):
        lap[z[0] + 19, z[1] + 19] = 0
    assert np.abs(lap).max() <= 1e-12


def test_direction_checks():
    with pytest.raises(ValueError):
        Direction(1.0, 1.0)
    with pytest.raises(ValueError):
        Direction(-0.1, 0.0)
    for a in np.linspace(0, math.pi / 4, 7):
        n = Direction.from_angle(a)
        assert n.angle == pytest.approx(a)
        assert np.linalg.norm(n.vector) == pytest.approx(1.0)


def test_estimate_c(table150):
    c = estimate_c(table150, 16)
    assert 0.15 <= c <= 0.25
    values = [estimate_c(table150, k) for k in (2, 3, 5, 9, 17)]
    assert all(b <= a for a, b in zip(values, values[1:]))
    assert estimate_c(table150, 16, mode="sites") >= c
    assert all(a in dyadic_angles(9) for a in dyadic_angles(5))


def test_half_plane_positive(table150):
    X, Y = table150.coords
    near = (np.hypot(X, Y) <= 75) & (X <= 0.15) & (X > -150)
    pts = np.column_stack([X[near], Y[near]])
    assert np.all(dir_derivative(table150, EAST, pts) > 0)


def test_level_set_inclusion(table150):
    for a in (0.0, 0.3, math.pi / 4):
        n = Direction.from_angle(a)
        assert check_level_set_inclusion(table150, n, 1, 10, 400 * 10).ok
    bad = check_level_set_inclusion(table150, EAST, 1, 10, 5)
    assert not bad.ok
    c = float(c_profile(table150, [0.0])[0])
    v = EAST.vector
    assert np.all(bad.violations @ v > c)
    assert required_R0prime(2.0, 1.0, 0.2) == pytest.approx(40.0)


def test_table_roundtrip(tmp_path):
    t = exact_potential(12)
    t.save(tmp_path / "t.bin")
    again = PotentialTable.load(tmp_path / "t.bin")
    assert np.array_equal(again.values, t.values)
    raw = bytearray((tmp_path / "t.bin").read_bytes())
    raw[-1] ^= 0xFF
    with pytest.raises(ValueError):
        PotentialTable.from_bytes(bytes(raw))


def test_corrupt_cache_rebuilt(tmp_path):
    exact_potential(10, cache_dir=tmp_path)
    path = tmp_path / "potential_L10.bin"
    data = bytearray(path.read_bytes())
    data[-3] ^= 0x55
    path.write_bytes(bytes(data))
    with pytest.warns(RuntimeWarning):
        t = exact_potential(10, cache_dir=tmp_path)
    assert t.harmonicity_residual()[0] <= 1e-12


def test_estimator(tmp_path):
    k = PotentialKernel(L=120, n_directions=8, cache_dir=tmp_path).fit()
    assert 1.02 <= k.lambda_ <= 1.04 and k.c_ >= 0.15
    assert k.transform(np.array([[1, 1]]))[0] == pytest.approx(4 / math.pi)


@settings(max_examples=40, deadline=None)
@given(st.integers(-149, 149), st.integers(-149, 149))
def test_local_harmonicity(table150, x, y):
    g = table150
    lap = 0.25 * (g(x + 1, y) + g(x - 1, y) + g(x, y + 1) + g(x, y - 1)) - g(x, y)
    assert lap == pytest.approx(1.0 if (x, y) == (0, 0) else 0.0, abs=1e-12)
