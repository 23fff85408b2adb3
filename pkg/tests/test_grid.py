import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mflab.grid import Axis, Grid, GridError, GridField, cell_average_periodic


def test_field_shape_is_checked():
    with pytest.raises(GridError):
        GridField(2, Grid.torus(4), np.zeros((4, 3)))


def test_binary_round_trip(tmp_path):
    g = Grid.phase_space(4, 3.0, 6)
    f = GridField(2, g, np.random.default_rng(0).normal(size=g.shape * 2))
    f.save(tmp_path / "f.bin")
    back = GridField.load(tmp_path / "f.bin")
    assert back.grid == g and back.order == 2
    np.testing.assert_array_equal(back.values, f.values)


def test_csv_export_has_format_tag(tmp_path):
    f = GridField(1, Grid.torus(3), [1.0, 2.0, 3.0])
    f.to_csv(tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0].startswith("# mflab-gridfield-v1")
    assert len(lines) == 2 + 3


def test_flat_index_outside_bounded_axis():
    g = Grid.interval(-1.0, 1.0, 4)
    idx = g.flat_index(np.array([[-1.5], [-1.0], [0.99], [1.0]]))
    assert idx.tolist() == [-1, 0, 3, -1]


def test_last_float_below_upper_edge_is_inside():
    ax = Axis(-5.0, 5.0, 20)
    assert ax.cell_index(np.array([np.nextafter(5.0, 0.0), np.nan])).tolist() == [19, -1]


@given(st.floats(-10, 10), st.floats(0.01, 10), st.integers(1, 64), st.floats(0, 1))
def test_points_in_bounded_axis_get_a_valid_cell(lower, length, cells, u):
    ax = Axis(lower, lower + length, cells)
    x = min(lower + u * length, np.nextafter(ax.upper, lower))
    i = int(ax.cell_index(np.array([x]))[0])
    assert 0 <= i < cells


def test_periodic_axis_wraps():
    ax = Axis(0.0, 1.0, 8, True)
    assert ax.cell_index(np.array([1.01, -0.01])).tolist() == [0, 7]


@given(arrays(float, 6, elements=st.floats(-5, 5)))
def test_integrate_slot_matches_sum(v):
    g = Grid.torus(6)
    f = GridField(2, g, np.add.outer(v, v))
    np.testing.assert_allclose(f.integrate_slot(1).values, (v + v.mean()) , atol=1e-12)


def test_cell_average_of_cosine_is_exact():
    n, cells = 64, 8
    x = (np.arange(n) + 0.5) / n
    avg = cell_average_periodic(np.cos(2 * np.pi * x), cells)
    edges = np.arange(cells + 1) / cells
    exact = np.diff(np.sin(2 * np.pi * edges)) / (2 * np.pi) * cells
    np.testing.assert_allclose(avg, exact, atol=1e-14)


@given(st.integers(1, 5), st.floats(0, 1))
def test_cell_average_preserves_mean(k, phase):
    n = 32
    x = (np.arange(n) + 0.5) / n
    u = 1.0 + 0.5 * np.cos(2 * np.pi * (k * x + phase))
    assert cell_average_periodic(u, 4).mean() == pytest.approx(1.0, abs=1e-13)
