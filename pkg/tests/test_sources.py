import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idla_lab.lattice import Disk
from idla_lab.sources import (
    CallableGrowth, DiskGrowth, Family, FlowSpec, FlowValidationError, SourceSequence, asymmetric_flow,
    discretize, estimate_flow_constants, example_flow, example_flow_radius, proportional_rate, sigma,
    source_density, validate_flow,
)



def test_example_flow_valid():
    assert validate_flow(example_flow(1)).ok
    assert validate_flow(example_flow(3)).ok
    assert validate_flow(asymmetric_flow()).ok


def test_touching_source_fails_condition_2():
    spec = FlowSpec(Disk((0, 0), 1.0), [Family(math.pi / 4, DiskGrowth((0.5, 0.0)), proportional_rate(1.0, math.pi / 4))])
    rep = validate_flow(spec)
    assert not rep.ok and "2" in rep.conditions_failed()
    with pytest.raises(FlowValidationError):
        validate_flow(spec, raise_on_failure=True)


def test_double_area_fails_condition_1():
    grow = CallableGrowth(lambda u: Disk((0, 0), math.sqrt(2 * u / math.pi)), "double")
    spec = FlowSpec(Disk((0, 0), 1.0), [Family(0.2, grow, proportional_rate(1.0, 0.2))])
    assert "1" in validate_flow(spec).conditions_failed()


def test_validate_needs_two_samples():
    with pytest.raises(ValueError):
        validate_flow(example_flow(1), samples=1)


def test_sigma_examples():
    for N in (1, 2, 4):
        spec = example_flow(N)
        assert sigma(spec, 0.3, np.array([[0.0, 0.0]]))[0] == 1 + N
        assert sigma(spec, 0.3, np.array([[5.0, 5.0]]))[0] == 0
        assert sigma(spec, 0.0, np.array([[0.7, 0.0]]))[0] == 1
    with pytest.raises(ValueError):
        sigma(example_flow(1), 10.0, np.array([[0.0, 0.0]]))


def test_example1_count_at_m10():
    # sites gained are exactly the lattice points of B_{1/2} at spacing 1/10: x^2 + y^2 <= 25
    expected = sum(1 for x in range(-5, 6) for y in range(-5, 6) if x * x + y * y <= 25)
    seq = discretize(example_flow(1), 10)
    assert expected == 81
    assert seq.n_m == expected


def test_multiplicities_equal_final_density():
    spec = example_flow(2)
    seq = discretize(spec, 12)
    x0, y0, dens = source_density(spec, spec.T, 12)
    expect = {(x0 + i, y0 + j): int(v) for (i, j), v in np.ndenumerate(dens) if v}
    assert seq.multiplicities() == expect
    assert np.all(np.diff(seq.s) >= 0)


@pytest.mark.parametrize("flow", [example_flow(1), asymmetric_flow()], ids=["example1", "asymmetric"])
def test_prefix_mass_consistency(flow):
    m = 16
    seq = discretize(flow, m)
    for s in np.linspace(0, flow.T, 13):
        # releases sit on the mesh grid, so the prefix trails the continuous mass by at most one step
        behind = int(source_density(flow, max(s - seq.mesh, 0.0), m)[2].sum())
        ahead = int(source_density(flow, min(s + seq.mesh, flow.T), m)[2].sum())
        assert behind <= seq.prefix_count(s) <= ahead


def test_prefix_multiplicity_bounded_by_density():
    spec = example_flow(2)
    seq = discretize(spec, 10)
    for s in (0.1, 0.3, 0.6):
        k = seq.prefix_count(s)
        x0, y0, dens = source_density(spec, s, 10)
        pre = SourceSequence(10, seq.x[:k], seq.y[:k], seq.s[:k], seq.entry[:k], seq.family[:k], seq.mesh)
        for (x, y), c in pre.multiplicities().items():
            assert c <= dens[x - x0, y - y0]


@pytest.mark.parametrize("m", [10, 20, 40])
def test_resolution_consistency(m):
    seq = discretize(example_flow(1), m)
    assert abs(seq.n_m / m**2 - math.pi / 4) <= 10 / m


def test_reordering_preserves_multiset():
    seq = discretize(example_flow(2), 16)
    for rule in ("reverse", "shuffle"):
        other = seq.reordered(rule, seed=5)
        assert other.multiplicities() == seq.multiplicities()
        assert np.array_equal(other.s, seq.s)
    with pytest.raises(ValueError):
        seq.reordered("sideways")


def test_csv_roundtrip():
    seq = discretize(example_flow(1), 8)
    back = SourceSequence.from_csv(seq.to_csv(), 8)
    assert np.array_equal(back.x, seq.x) and np.array_equal(back.y, seq.y)
    assert np.array_equal(back.s, seq.s)


def test_flow_json_roundtrip():
    spec = asymmetric_flow()
    again = FlowSpec.from_json(spec.to_json())
    assert again.spec_hash() == spec.spec_hash()
    pts = np.random.default_rng(0).uniform(3.5, 6.5, size=(300, 2))
    for s in (0.0, 0.1, spec.T):
        assert np.array_equal(sigma(spec, s, pts), sigma(again, s, pts))


def test_flow_constants_example1():
    spec = example_flow(1)
    fc = estimate_flow_constants(spec, lambda s: Disk((0, 0), example_flow_radius(s)), samples=7)
    assert fc.u == pytest.approx(2 * math.pi, rel=1e-9)
    assert fc.U == pytest.approx(2 * math.pi * math.sqrt(1 + spec.T / math.pi), rel=1e-9)
    # closed form: (r(s1) - r(s0)) / (sqrt(1+s1) - sqrt(1+s0)) over the same grid of pairs
    ts = np.linspace(0, spec.T, 7)
    ratios = [(example_flow_radius(b) - example_flow_radius(a)) / (math.sqrt(1 + b) - math.sqrt(1 + a))
              for i, a in enumerate(ts) for b in ts[i + 1:]]
    assert fc.v == pytest.approx(min(ratios), abs=2e-3)
    assert fc.V == pytest.approx(max(ratios), abs=2e-3)
    assert 0 < fc.v <= fc.V


def test_flow_constants_degenerate():
    spec = FlowSpec(Disk((0, 0), 1.0), [])
    with pytest.raises(ValueError):
        estimate_flow_constants(spec, lambda s: Disk((0, 0), 1.0))


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_sigma_monotone_in_time(a, b):
    spec = asymmetric_flow()
    s0, s1 = sorted((a * spec.T, b * spec.T))
    pts = np.random.default_rng(1).uniform(3.8, 5.8, size=(200, 2))
    assert np.all(sigma(spec, s0, pts) <= sigma(spec, s1, pts))
