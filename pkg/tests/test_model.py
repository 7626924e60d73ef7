import numpy as np
import pytest

from robustjd.errors import ConfigurationError, ModelValidationError
from robustjd.model import (JumpDiffusionModel, TimeGrid, discount_factors,
                            poisson_cell_means, read_bundle, simulate_paths,
                            write_bundle)


def test_grid_basic():
    grid = TimeGrid.regular(1.0, 4)
    assert grid.n_steps == 4
    assert grid.horizon == 1.0
    assert np.allclose(grid.dt, 0.25)
    assert grid.uniform


def test_grid_rejects_degenerate():
    with pytest.raises(ConfigurationError):
        TimeGrid.regular(1.0, 0)
    with pytest.raises(ConfigurationError):
        TimeGrid.from_times([0.0, 0.5, 0.5, 1.0])
    with pytest.raises(ConfigurationError):
        TimeGrid.from_times([0.1, 0.5, 1.0])


def test_nonuniform_grid_flagged():
    grid = TimeGrid.from_times([0.0, 0.3, 1.0])
    assert not grid.uniform
    assert np.allclose(grid.dt, [0.3, 0.7])


def test_model_validation():
    with pytest.raises(ModelValidationError):
        JumpDiffusionModel.constant_xi(1, [[0.0]], [1.0])   # zero mark
    with pytest.raises(ModelValidationError):
        JumpDiffusionModel.constant_xi(1, [[1.0]], [-1.0])  # negative weight
    with pytest.raises(ModelValidationError):
        JumpDiffusionModel.constant_xi(1, [[1.0]], [np.inf])
    with pytest.raises(ModelValidationError):
        JumpDiffusionModel.constant_xi(0, [[1.0]], [1.0])


def test_xi_bound_enforced(grid20):
    model = JumpDiffusionModel.constant_xi(1, [[1.0]], [1.0], xi=2.0,
                                           xi_bound=1.0)
    with pytest.raises(ModelValidationError):
        model.validate_on(grid20)
    ok = JumpDiffusionModel.constant_xi(1, [[1.0]], [1.0], xi=0.7,
                                        xi_bound=1.0)
    xi = ok.xi_on_grid(grid20)
    assert xi.shape == (21, 1)
    assert float(xi.max()) <= 1.0


def test_no_intensity_means_no_jumps(grid20):
    model = JumpDiffusionModel.constant_xi(1, [[1.0]], [0.0])
    paths = simulate_paths(model, grid20, 500, 1)
    assert not paths.jump_counts.any()


def test_poisson_cell_mean(model_jump, grid20, paths_jump):
    # xi = 1, lambda = 2, T = 1: mean count per path over [0, T] is 2
    means = poisson_cell_means(model_jump, grid20)
    assert np.allclose(means.sum(), 2.0)
    total = paths_jump.jump_counts.sum(axis=(1, 2))
    se = total.std(ddof=1) / np.sqrt(paths_jump.n_paths)
    assert abs(total.mean() - 2.0) < 5 * se


def test_brownian_increment_moments(paths_jump, grid20):
    K = paths_jump.n_paths
    for n in (0, 7, 19):
        col = paths_jump.dW[:, n, 0]
        se = col.std(ddof=1) / np.sqrt(K)
        assert abs(col.mean()) < 5 * se
        var_se = np.sqrt(2.0 / (K - 1)) * col.var()
        assert abs(col.var() - grid20.dt[n]) < 5 * var_se


def test_compensated_jump_martingality(model_jump, grid20, paths_jump):
    # deterministic weight psi(t, x): sum of compensated counts has mean 0
    means = poisson_cell_means(model_jump, grid20)
    weights = np.cos(grid20.times[:-1])[:, None]
    vals = (weights * (paths_jump.jump_counts - means)).sum(axis=(1, 2))
    se = vals.std(ddof=1) / np.sqrt(paths_jump.n_paths)
    assert abs(vals.mean()) < 5 * se


def test_determinism_same_seed(model_jump, grid20):
    a = simulate_paths(model_jump, grid20, 300, 99)
    b = simulate_paths(model_jump, grid20, 300, 99)
    assert np.array_equal(a.dW, b.dW)
    assert np.array_equal(a.jump_counts, b.jump_counts)


def test_per_path_substreams(model_jump, grid20):
    # path k's draws do not depend on how many other paths are simulated
    big = simulate_paths(model_jump, grid20, 50, 7)
    small = simulate_paths(model_jump, grid20, 10, 7)
    assert np.array_equal(big.dW[:10], small.dW)
    assert np.array_equal(big.jump_counts[:10], small.jump_counts)


def test_simulate_rejects_bad_input(model_jump, grid20):
    with pytest.raises(ConfigurationError):
        simulate_paths(model_jump, grid20, 0, 1)


def test_bundle_roundtrip(tmp_path, model_jump, grid20):
    bundle = simulate_paths(model_jump, grid20, 64, 5)
    fn = tmp_path / "bundle.bin"
    write_bundle(fn, bundle)
    back = read_bundle(fn)
    assert back.seed == 5
    assert np.array_equal(back.dW, bundle.dW)
    assert np.array_equal(back.jump_counts, bundle.jump_counts)


def test_bundle_rejects_garbage(tmp_path):
    fn = tmp_path / "junk.bin"
    fn.write_bytes(b"NOTBIN" + b"\x00" * 64)
    with pytest.raises(ConfigurationError):
        read_bundle(fn)


def test_discount_zero_rate(grid20, paths_nojump):
    disc = discount_factors(0.0, grid20, paths_nojump)
    assert np.all(disc.S == 1.0)


def test_discount_direct_value(paths_nojump):
    # delta = 0.1, T = 1, N = 10: S_T = exp(-0.1)
    grid = TimeGrid.regular(1.0, 10)
    disc = discount_factors(0.1, grid, paths_nojump)
    assert np.allclose(disc.S[0, -1], np.exp(-0.1))
    assert disc.S[0, 0] == 1.0
    assert np.all(np.diff(disc.S[0]) <= 0)


def test_discount_saturates_lower_bound(grid20, paths_nojump):
    rate = 0.3
    disc = discount_factors(rate, grid20, paths_nojump)
    assert disc.delta_sup == rate
    assert np.allclose(disc.S[0], np.exp(-rate * grid20.times))


def test_discount_rejects_negative(grid20, paths_nojump):
    with pytest.raises(ModelValidationError):
        discount_factors(-0.1, grid20, paths_nojump)


def test_brownian_levels_cumsum(paths_jump):
    w = paths_jump.brownian_levels()
    assert w.shape[1] == paths_jump.n_steps + 1
    assert np.all(w[:, 0, :] == 0.0)
    assert np.allclose(w[:, -1, :], paths_jump.dW.sum(axis=1))
