import csv
import math

import numpy as np
import pytest

from weakcv.models import SdeModel, constant_model, example5d_functional, example5d_model
from weakcv.rng import uniforms
from weakcv.schemes import (
    EULER,
    ORDER2,
    Grid,
    draw_increments,
    euler_step,
    replay_states,
    sample_second_order_increment,
    second_order_step,
    signs_from_uniforms,
    simulate_paths,
    step,
    three_point_from_uniforms,
    v_matrix_from_uniforms,
    write_paths_csv,
)

S3 = math.sqrt(3.0)


def _linear_model():
    # mu = 0, sigma(x) = x, analytic generator terms supplied by hand
    return SdeModel("lin", 1, 1, lambda x: np.zeros_like(x), lambda x: np.asarray(x)[..., None], x0=[1.0])


def test_threshold_mapping():
    assert signs_from_uniforms(0.25) == -1 and signs_from_uniforms(0.75) == 1
    assert signs_from_uniforms(0.5) == 1
    assert three_point_from_uniforms(0.5) == 0.0
    np.testing.assert_array_equal(three_point_from_uniforms([0.0, 1 / 6, 5 / 6 - 1e-12, 5 / 6]), [-S3, 0, 0, S3])


def test_v_matrix_structure():
    u = np.random.default_rng(0).random((50, 6))
    v = v_matrix_from_uniforms(u, 4)
    assert v.shape == (50, 4, 4)
    np.testing.assert_array_equal(np.diagonal(v, axis1=1, axis2=2), -1)
    off = v + np.swapaxes(v, 1, 2)
    off[:, np.arange(4), np.arange(4)] = 0
    assert np.all(off == 0)
    assert set(np.unique(v)) <= {-1, 1}


def test_increment_moments():
    ids = np.arange(1_000_000, dtype=np.uint64)
    xi, v = draw_increments(ORDER2, 7, ids, 1, 2)
    assert abs(xi.mean()) < 4 * math.sqrt(1 / 2e6)
    assert xi[:, 0].var() == pytest.approx(1.0, abs=0.01)
    assert np.mean(xi[:, 0] == 0) == pytest.approx(2 / 3, abs=0.002)
    assert abs(v[:, 0, 1].mean()) < 0.005
    s, _ = draw_increments(EULER, 7, ids, 3, 1)
    assert abs(s.mean()) < 0.005


def test_euler_step_examples():
    m = constant_model([0.0], [[1.0]], x0=[0.0])
    assert euler_step(m, 0.25, np.zeros(1), np.ones(1))[0] == pytest.approx(0.5)
    ex = example5d_model()
    np.testing.assert_allclose(euler_step(ex, 1.0, np.zeros(5), np.ones(5)), [1, 1, 1, 1, 5], atol=1e-15)


def _direct_second_order(x, y, delta):
    # independent hand coding for mu = 0, sigma(x) = x in one dimension
    return x + x * y * math.sqrt(delta) + 0.5 * x * (y * y - 1) * delta


def test_second_order_step_linear_diffusion():
    m = _linear_model()
    out = second_order_step(m, 0.01, np.array([1.0]), np.array([S3]), np.array([[-1]]))
    assert out[0] == pytest.approx(1.1832050807568877, abs=1e-9)
    assert out[0] == pytest.approx(_direct_second_order(1.0, S3, 0.01), abs=1e-9)
    for x, y in [(0.3, 0.0), (-2.0, -S3), (1.7, S3)]:
        got = second_order_step(m, 0.04, np.array([x]), np.array([y]), np.array([[-1]]))[0]
        assert got == pytest.approx(_direct_second_order(x, y, 0.04), abs=1e-8)


def test_second_order_constant_coefficients_reduce_to_gaussian_step():
    sig = np.array([[1.0, 0.5], [0.2, 0.8]])
    m = constant_model([0.0, 0.0], sig)
    x = np.array([0.4, -1.0])
    y = np.array([S3, 0.0])
    v = np.array([[-1, 1], [-1, -1]])
    np.testing.assert_allclose(second_order_step(m, 0.09, x, y, v), x + sig @ y * 0.3, atol=1e-15)


def test_second_order_matches_euler_for_zero_noise_derivatives():
    # constant drift: extra terms of the order-2 map vanish
    m = constant_model([0.3, -0.2], np.eye(2))
    x = np.zeros(2)
    y = np.array([S3, -S3])
    v = -np.ones((2, 2))
    np.testing.assert_allclose(second_order_step(m, 0.25, x, y, v), euler_step(m, 0.25, x, y), atol=1e-15)


def test_single_step_path():
    ex = example5d_model()
    g = Grid(1)
    b = simulate_paths(ex, ORDER2, g, 1, 3)
    xi, v = b.increments_at(1)
    np.testing.assert_array_equal(b.states[:, 1], step(ex, ORDER2, 1.0, b.states[:, 0], xi, v))


def test_keyed_paths_do_not_depend_on_batch_size():
    ex = example5d_model()
    g = Grid(4)
    a = simulate_paths(ex, ORDER2, g, 5, 99)
    b = simulate_paths(ex, ORDER2, g, 300, 99, chunk_size=64, threads=3)
    np.testing.assert_array_equal(a.states, b.states[:5])
    c = simulate_paths(ex, ORDER2, g, 2, 99, path_offset=3)
    np.testing.assert_array_equal(c.states, a.states[3:5])
    assert not np.array_equal(simulate_paths(ex, ORDER2, g, 5, 100).states, a.states)


def test_increments_match_rng_stream():
    b = simulate_paths(example5d_model(), EULER, Grid(3), 4, 21)
    u = uniforms(21, b.path_ids, 2, 5)
    np.testing.assert_array_equal(b.xi[:, 1], signs_from_uniforms(u))
    inc = sample_second_order_increment(21, 0, 1, 3)
    assert inc.xi.shape == (3,) and inc.v.shape == (3, 3)


@pytest.mark.parametrize("scheme", [EULER, ORDER2])
def test_replay_is_bit_exact(scheme):
    ex = example5d_model()
    b = simulate_paths(ex, scheme, Grid(6), 200, 5)
    np.testing.assert_array_equal(replay_states(ex, b), b.states)


def test_sign_flip_symmetry_euler():
    # flipping every sign maps x to -x for the odd 5-d dynamics
    ex = example5d_model()
    g = Grid(3)
    b = simulate_paths(ex, EULER, g, 50, 8)
    x = np.zeros((50, 5))
    for j in range(1, 4):
        x = euler_step(ex, g.delta, x, -b.xi[:, j - 1])
    np.testing.assert_allclose(x, -b.terminal, atol=1e-13)


def test_smc_consistency_5d_euler():
    ex, f = example5d_model(), example5d_functional()
    b = simulate_paths(ex, EULER, Grid(16), 100_000, 1)
    vals = f(b.terminal)
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    assert abs(vals.mean() - 0.002069) < 4 * se + 1e-3  # bias budget ~ c * Delta


def test_csv_dump(tmp_path):
    b = simulate_paths(example5d_model(), ORDER2, Grid(2), 3, 4)
    p = tmp_path / "paths.csv"
    write_paths_csv(b, p)
    with open(p) as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:3] == ["path_id", "j", "x1"]
    assert len(rows[0]) == 2 + 5 + 5 + 10
    assert len(rows) == 1 + 3 * 3
    assert float(rows[2][2]) == b.states[0, 1, 0]


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid(0)
    with pytest.raises(ValueError):
        simulate_paths(example5d_model(), "rk4", Grid(1), 1, 0)
    assert Grid(4).delta == 0.25
