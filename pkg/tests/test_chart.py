import math

import numpy as np
import pytest

from conheat import GeometryError, InputError, build_chart, compare_kernels, estimate_frames, generate_manifold
from conheat.chart import euclidean_kernel, excluded, rescaled_kernel, z_kernel
from oracles import torus_scalar_kernel


def _grid(half=10.0, h=0.02):
    u = np.arange(-half, half + h / 2, h)
    X, Y = np.meshgrid(u, u, indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel()]), h * h


@pytest.fixture(scope="module")
def torus_chart(small_torus, small_torus_stencil):
    M, F = small_torus
    return build_chart(M, F, 0, 0.1, 0.2, stencil=small_torus_stencil)


def test_euclidean_kernel_value():
    block = euclidean_kernel([0.3, -1.0], 0.5, [0.3, -1.0])
    np.testing.assert_allclose(block, 0.159155 * np.eye(2), atol=5e-7)
    assert block[0, 0] == 1 / (2 * math.pi)


def test_euclidean_kernel_symmetric():
    x, y = np.array([0.2, 1.1]), np.array([-0.4, 0.3])
    np.testing.assert_array_equal(euclidean_kernel(x, 0.7, y), euclidean_kernel(y, 0.7, x))


def test_euclidean_kernel_integrates_to_identity():
    pts, dA = _grid()
    total = euclidean_kernel(pts, 0.5, [0.1, -0.2]).sum(axis=0) * dA
    np.testing.assert_allclose(total, np.eye(2), atol=1e-8)


def test_z_kernel_flat_metric_is_euclidean():
    x = np.random.default_rng(0).standard_normal((50, 2))
    y = np.array([0.3, 0.1])
    np.testing.assert_array_equal(z_kernel(x, 0.4, y, np.eye(2)), euclidean_kernel(x, 0.4, y))


def test_z_kernel_closed_form():
    block = z_kernel([0.0, 0.0], 0.5, [1.0, 0.0], np.diag([4.0, 1.0]))
    np.testing.assert_allclose(block, 2 / (2 * math.pi) * math.exp(-2) * np.eye(2), rtol=1e-14)


def test_z_kernel_integrates_to_identity():
    pts, dA = _grid()
    g = np.array([[2.0, 0.3], [0.3, 0.8]])
    total = z_kernel(pts, 0.5, [0.0, 0.2], g).sum(axis=0) * dA
    np.testing.assert_allclose(total, np.eye(2), atol=1e-8)


def test_model_kernels_reject_bad_input():
    with pytest.raises(InputError):
        euclidean_kernel([0, 0], 0.0, [0, 0])
    with pytest.raises(GeometryError):
        z_kernel([0, 0], 0.5, [0, 0], np.full((2, 2), np.nan))


def test_flat_chart(torus_chart):
    ch = torus_chart
    assert ch.members[0] == 0
    np.testing.assert_array_equal(ch.coords[0], 0.0)
    assert np.abs(ch.metric[0] - np.eye(2)).max() < 1e-3
    assert ch.distortion() < 1e-3
    assert ch.core.sum() > 0 and np.all(ch.interior[ch.core])


def test_sphere_chart_distortion():
    M = generate_manifold("sphere", 4)
    ch = build_chart(M, estimate_frames(M), 5, 0.15, 0.3)
    np.testing.assert_array_equal(ch.coords[0], 0.0)
    assert ch.distortion() < 0.1


def test_chart_errors(small_torus, small_torus_stencil):
    M, F = small_torus
    with pytest.raises(GeometryError):
        build_chart(M, F, 0, 0.01, 0.02, stencil=small_torus_stencil)
    with pytest.raises(InputError):
        build_chart(M, F, 0, 0.1, 0.2, max_radius=0.15, stencil=small_torus_stencil)
    with pytest.raises(InputError):
        build_chart(M, F, 0, -0.1, 0.2, stencil=small_torus_stencil)


def test_rescaled_kernel_at_center(small_torus_spectra, torus_chart):
    Sc, _ = small_torus_spectra
    b = rescaled_kernel(Sc, torus_chart, [0, 0], 0.5, [0, 0])
    assert b.snap_x == 0 and b.snap_y == 0
    np.testing.assert_allclose(b.matrix, np.eye(2) / (2 * math.pi), atol=0.1 / (2 * math.pi))
    # the lattice sum at t = s r^2 agrees with the single Gaussian
    assert math.isclose(torus_chart.r**2 * torus_scalar_kernel(0.0, 0.0, b.t), 1 / (2 * math.pi), rel_tol=1e-12)


def test_rescaled_kernel_scaling(small_torus_spectra, torus_chart):
    Sc, _ = small_torus_spectra
    ch = torus_chart
    x, y = ch.scaled[7], ch.scaled[0]
    a = rescaled_kernel(Sc, ch, x, 0.4, y)
    ch2 = ch.rescaled(2 * ch.r)
    b = rescaled_kernel(Sc, ch2, x / 2, 0.1, y / 2)
    assert (a.x_vertex, a.y_vertex, a.t) == (b.x_vertex, b.y_vertex, b.t)
    np.testing.assert_allclose(b.matrix, 2**2 * a.matrix, rtol=1e-14)


def test_rescaled_kernel_short_time_off_diagonal(small_torus_spectra, torus_chart):
    Sc, _ = small_torus_spectra
    x = torus_chart.scaled[np.argmax(np.linalg.norm(torus_chart.scaled * torus_chart.interior[:, None], axis=1))]
    vals = [np.abs(rescaled_kernel(Sc, torus_chart, x, s, [0, 0]).matrix).max() for s in (0.5, 0.1, 0.02)]
    assert vals[0] > vals[1] > vals[2]
    assert vals[2] < 1e-3 * vals[0]


def test_rescaled_kernel_errors(small_torus_spectra, torus_chart):
    Sc, _ = small_torus_spectra
    with pytest.raises(InputError):
        rescaled_kernel(Sc, torus_chart, [5.0, 0.0], 0.5, [0, 0])
    with pytest.raises(InputError):
        rescaled_kernel(Sc, torus_chart, [0.0, 0.0], 0.0, [0, 0])


def test_excluded_region():
    pts = np.array([[0.0, 0.1], [0.6, 0.0], [0.0, 0.0]])
    np.testing.assert_array_equal(excluded(pts, 0.1, [0, 0]), [True, False, True])
    assert not excluded(pts, 0.25, [0, 0]).any()


def test_flat_torus_comparison(small_torus_spectra, torus_chart):
    Sc, _ = small_torus_spectra
    comp = compare_kernels(Sc, torus_chart)
    assert comp.n_samples > 0
    assert comp.relative_diff_euclid < 0.05
    assert comp.sup_diff_z < 0.05 * comp.sup_euclid
    assert comp.distortion < 1e-3
    for sample in comp.samples:
        assert not excluded(np.array(sample["x"]), sample["s"], sample["y"])[0]
        # Kbar vs Z and Z vs Gamma_E pairwise within 5%
        assert abs(sample["z"] - sample["euclid"]) <= 0.05 * comp.sup_euclid
    d = comp.to_dict()
    assert {"chart_center", "r", "distortion", "sup_diff_euclid", "sup_diff_Z", "grad_sup_diff",
            "decay_fit_C", "samples"} <= set(d)


def test_comparison_rejects_bad_times(small_torus_spectra, torus_chart):
    Sc, _ = small_torus_spectra
    with pytest.raises(InputError):
        compare_kernels(Sc, torus_chart, s_values=(0.5, 3.0))
