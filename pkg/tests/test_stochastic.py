import math

import numpy as np
import pytest

from mfbsde.types import TimeGrid, EmpiricalLaw, InitialCondition
from mfbsde.errors import ValidationError, DimensionError, CapabilityError
from mfbsde.stochastic import (
    BrownianDriver, stream_generator, weighted_l2_norm, weighted_l2_distance,
    wasserstein2, sample_initial
)


def test_grid_steps_and_weights():
    grid = TimeGrid(2.0, 0.01)
    assert grid.n_steps == 200
    assert grid.times[-1] == pytest.approx(2.0)
    assert grid.weights.sum() == pytest.approx(2.0)

    discounted = grid.with_discount(0.5)
    assert discounted.K == 0.5
    assert discounted.weights.sum() == pytest.approx(2 * (1 - math.exp(-1.0)), abs=1e-5)


@pytest.mark.parametrize("horizon,dt", [(1.0, 0.0), (1.0, -0.1), (0.0, 0.1), (1.0, 0.3)])
def test_grid_rejects_bad_steps(horizon, dt):
    with pytest.raises(ValidationError):
        TimeGrid(horizon, dt)


def test_seed_range():
    with pytest.raises(ValidationError):
        stream_generator(-1)
    with pytest.raises(ValidationError):
        stream_generator(2 ** 64)
    stream_generator(2 ** 64 - 1)


def test_driver_is_reproducible_and_prefix_stable():
    grid = TimeGrid(1.0, 0.1)
    a = BrownianDriver.generate(42, 10, grid)
    b = BrownianDriver.generate(42, 10, grid)
    small = BrownianDriver.generate(42, 5, grid)
    other = BrownianDriver.generate(43, 10, grid)

    np.testing.assert_array_equal(a.increments, b.increments)
    np.testing.assert_array_equal(a.increments[:5], small.increments)
    assert not np.array_equal(a.increments, other.increments)
    assert not a.increments.flags.writeable


def test_driver_increment_variance():
    grid = TimeGrid(1.0, 0.01)
    driver = BrownianDriver.generate(3, 2000, grid)
    assert driver.n_particles == 2000
    assert driver.n_steps == 100
    assert driver.increments.var() == pytest.approx(grid.dt, rel=0.05)
    assert abs(driver.increments.mean()) < 5 * math.sqrt(grid.dt / driver.increments.size)


def test_paths_start_at_zero():
    grid = TimeGrid(1.0, 0.25)
    driver = BrownianDriver.generate(0, 3, grid)
    w = driver.paths(2.0)
    assert w.shape == (3, 5)
    np.testing.assert_array_equal(w[:, 0], 0.0)
    np.testing.assert_allclose(w[:, -1], 2.0 * driver.increments.sum(axis=1))


def test_weighted_norm_of_constant():
    grid = TimeGrid(4.0, 0.01)
    assert weighted_l2_norm(np.ones(grid.n_steps + 1), grid) == pytest.approx(2.0)

    ones = np.ones((7, grid.n_steps + 1))
    assert weighted_l2_distance(3 * ones, ones, grid) == pytest.approx(4.0)

    with pytest.raises(DimensionError):
        weighted_l2_norm(np.ones(grid.n_steps), grid)


def test_weighted_norm_closed_form():
    grid = TimeGrid(10.0, 0.001, 1.0)
    ones = np.ones(grid.n_steps + 1)

    # sqrt(∫ e^{-t} dt) on [0, 10]
    assert weighted_l2_norm(ones, grid) == pytest.approx(math.sqrt(1 - math.exp(-10.0)), abs=1e-4)
    assert weighted_l2_norm(ones, grid) == pytest.approx(0.999977, abs=1e-4)
    assert weighted_l2_norm(3 * ones, grid) == pytest.approx(2.99993, abs=1e-4)


def test_weighted_norm_is_a_norm():
    grid = TimeGrid(5.0, 0.05, 0.8)
    rng = np.random.default_rng(12)

    for _ in range(100):
        n = int(rng.integers(1, 20))
        u = rng.standard_normal((n, grid.n_steps + 1)) * rng.uniform(0.1, 10.0)
        v = rng.standard_normal((n, grid.n_steps + 1)) * rng.uniform(0.1, 10.0)
        c = float(rng.uniform(-5.0, 5.0))

        nu, nv = weighted_l2_norm(u, grid), weighted_l2_norm(v, grid)
        assert weighted_l2_norm(u + v, grid) <= (nu + nv) * (1 + 1e-10)
        assert weighted_l2_norm(c * u, grid) == pytest.approx(abs(c) * nu, rel=1e-10)


def test_wasserstein_one_dimensional():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(100)
    a, b = EmpiricalLaw(x), EmpiricalLaw(x + 0.7)
    assert wasserstein2(a, b) == pytest.approx(0.7)
    assert wasserstein2(a, a) == 0.0

    # the same quantile function at different resolutions
    assert wasserstein2(EmpiricalLaw([0.0, 1.0]), EmpiricalLaw([0.0, 0.0, 1.0, 1.0])) == pytest.approx(0.0)
    assert wasserstein2(EmpiricalLaw([0.0]), EmpiricalLaw([1.0, 3.0])) == pytest.approx(math.sqrt(5.0))


def test_wasserstein_metric_axioms():
    rng = np.random.default_rng(7)

    for _ in range(200):
        a, b, c = (
            EmpiricalLaw(rng.normal(rng.uniform(-3, 3), rng.uniform(0.1, 2.0), size=int(rng.integers(1, 65))))
            for _ in range(3)
        )
        ab, ba = wasserstein2(a, b), wasserstein2(b, a)
        assert ab == ba
        assert ab >= 0.0
        assert ab <= wasserstein2(a, c) + wasserstein2(c, b) + 1e-10


def test_wasserstein_of_paired_clouds():
    rng = np.random.default_rng(8)

    for _ in range(100):
        n = int(rng.integers(2, 65))
        x, y = rng.normal(0.0, 2.0, size=(2, n))
        xp = x + rng.normal(rng.uniform(-1, 1), rng.uniform(0.1, 2.0), size=n)
        yp = rng.permutation(y) + rng.uniform(-1, 1)

        bound = math.sqrt(np.mean((x - xp) ** 2)) + math.sqrt(np.mean((y - yp) ** 2))
        assert wasserstein2(EmpiricalLaw.from_columns(x, y), EmpiricalLaw.from_columns(xp, yp)) <= bound + 1e-10


def test_wasserstein_two_dimensional():
    rng = np.random.default_rng(1)
    pts = rng.standard_normal((40, 2))
    shifted = pts + np.array([1.0, 0.0])
    assert wasserstein2(EmpiricalLaw(pts), EmpiricalLaw(shifted)) == pytest.approx(1.0)

    with pytest.raises(CapabilityError):
        wasserstein2(EmpiricalLaw(pts), EmpiricalLaw(pts[:20]))
    with pytest.raises(CapabilityError):
        wasserstein2(EmpiricalLaw(pts), EmpiricalLaw(shifted), assignment_cap=10)
    with pytest.raises(DimensionError):
        wasserstein2(EmpiricalLaw(pts), EmpiricalLaw(pts[:, 0]))


def test_sample_initial():
    np.testing.assert_array_equal(sample_initial(InitialCondition.deterministic(2.5), 4), 2.5)

    g = sample_initial(InitialCondition.gaussian(1.0, 4.0), 20000, seed=5)
    assert g.mean() == pytest.approx(1.0, abs=0.05)
    assert g.var() == pytest.approx(4.0, rel=0.05)
    np.testing.assert_array_equal(g, sample_initial(InitialCondition.gaussian(1.0, 4.0), 20000, seed=5))

    u = sample_initial(InitialCondition.uniform(-1.0, 2.0), 1000, seed=5)
    assert u.min() >= -1.0 and u.max() <= 2.0

    with pytest.raises(ValidationError):
        sample_initial(InitialCondition.deterministic(0.0), 0)
