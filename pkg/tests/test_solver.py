import math

import numpy as np
import pytest

from mintnet import mint, solver
from mintnet.errors import BracketError, DivergenceError
from mintnet.solver import SolverConfig

from conftest import random_layer


def _linear(rng, C=2):
    return mint.zero_residual(random_layer(rng, C, 2, 3))


def test_config_validation():
    assert SolverConfig(alpha=1.5).guaranteed
    assert not SolverConfig(alpha=2.5).guaranteed
    for bad in ({"alpha": 0.0}, {"max_iters": 0}, {"tol": 0.0}):
        with pytest.raises(ValueError):
            SolverConfig(**bad)


def test_linear_layer_one_newton_step():
    rng = np.random.default_rng(0)
    p = _linear(rng)
    z = rng.normal(size=(2, 2, 4, 4))
    x0 = rng.normal(size=z.shape)
    res = solver.invert_mint(p, z, SolverConfig(alpha=1.0, max_iters=1, tol=1e-300), x0=x0)
    expected = (z - np.asarray(p.b3)[None, :, None, None]) / p.t[None, :, None, None]
    np.testing.assert_allclose(res.x, expected, rtol=1e-14, atol=1e-14)
    assert res.iterations_used == 1


def test_fixed_point_is_stationary():
    rng = np.random.default_rng(1)
    p = random_layer(rng, 2, 2, 3, scale=0.5)
    x = rng.normal(size=(1, 2, 4, 4))
    z = mint.forward(p, x)
    for alpha in (0.5, 1.0, 1.7):
        res = solver.invert_mint(p, z, SolverConfig(alpha=alpha, tol=1e-300, max_iters=3), x0=x)
        np.testing.assert_allclose(res.x, x, atol=1e-14)


def test_random_layer_converges_and_matches_truth():
    rng = np.random.default_rng(2)
    p = random_layer(rng, 2, 3, 3)
    x = rng.normal(size=(1, 2, 8, 8))
    z = mint.forward(p, x)
    res = solver.invert_mint(p, z, SolverConfig(tol=1e-24))
    assert res.converged and res.iterations_used <= 120 and res.alpha_guaranteed
    assert np.mean((res.x - x) ** 2) < 1e-8


def test_linear_ratio_is_one_minus_alpha():
    rng = np.random.default_rng(3)
    p = _linear(rng)
    z = rng.normal(size=(1, 2, 4, 4))
    for alpha in (0.5, 1.5, 0.25):
        res = solver.invert_mint(p, z, SolverConfig(alpha=alpha, max_iters=6, tol=1e-300, record_trace=True))
        for r in solver.contraction_ratios(res.trace):
            assert abs(r - abs(1 - alpha)) < 1e-10
    res = solver.invert_mint(p, z, SolverConfig(alpha=1.0, tol=1e-20, record_trace=True))
    assert res.iterations_used == 1


def test_probe_ratios_near_one_minus_alpha(tmp_path):
    rng = np.random.default_rng(4)
    p = random_layer(rng, 2, 2, 3, scale=0.3)
    rows = solver.convergence_probe(p, (1, 2, 6, 6), [0.5, 1.0, 1.5], T=120, rng=5, tol=1e-26,
                                    csv_path=tmp_path / "probe.csv")
    for row in rows:
        assert not row.diverged and row.iterations_to_tol is not None
        assert abs(row.ratio - abs(1 - row.alpha)) < 0.1
    lines = (tmp_path / "probe.csv").read_text().splitlines()
    assert lines[0] == "alpha,iter,error" and len(lines) > 3


def test_large_alpha_diverges_or_fails():
    rng = np.random.default_rng(5)
    p = _linear(rng)
    z = rng.normal(size=(1, 2, 4, 4))
    res = solver.invert_mint(p, z, SolverConfig(alpha=3.0, max_iters=50, tol=1e-12))
    assert not res.converged and not res.alpha_guaranteed


def test_divergence_error_carries_iteration():
    def f(x):
        return x * 1e200

    with pytest.raises(DivergenceError) as info:
        solver.invert_fixed_point(f, lambda x: np.full_like(x, 1e-200), np.ones((1, 1, 2, 2)),
                                  np.full((1, 1, 2, 2), 1e100), SolverConfig(max_iters=10))
    assert info.value.iteration >= 1


def test_sequential_oracle_linear_and_counts():
    rng = np.random.default_rng(6)
    p = _linear(rng)
    z = rng.normal(size=(2, 2, 3, 3))
    res = solver.invert_sequential_oracle(lambda v: mint.forward(p, v), z, "lower")
    expected = (z - np.asarray(p.b3)[None, :, None, None]) / p.t[None, :, None, None]
    np.testing.assert_allclose(res.x, expected, atol=1e-10)
    assert res.coordinate_solves == 18


@pytest.mark.parametrize("orientation", ["lower", "upper"])
def test_sequential_matches_fixed_point(orientation):
    rng = np.random.default_rng(7)
    p = random_layer(rng, 1, 3, 3, orientation)
    x = rng.normal(size=(1, 1, 4, 4))
    z = mint.forward(p, x)
    seq = solver.invert_sequential_oracle(lambda v: mint.forward(p, v), z, orientation)
    fp = solver.invert_mint(p, z, SolverConfig(tol=1e-26))
    assert seq.coordinate_solves == 16
    assert np.max(np.abs(seq.x - fp.x)) < 1e-6
    assert np.max(np.abs(seq.x - x)) < 1e-6


def test_sequential_bracket_failure():
    with pytest.raises(BracketError):
        solver.invert_sequential_oracle(lambda v: np.tanh(v), np.full((1, 1, 1, 2), 5.0), "lower",
                                        max_doublings=10)


def test_contraction_ratio_floor():
    assert solver.contraction_ratios([1.0, 0.25, 1e-30, 1e-32]) == [0.5, math.sqrt(1e-30 / 0.25)]
