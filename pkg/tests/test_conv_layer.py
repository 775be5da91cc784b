import numpy as np
import pytest

from oracles import loop_conv_full, loop_unpool, normal_equations_solve
from starnet.activation import Activation
from starnet.conv_layer import (
    ConvSpec,
    ConvUnpoolLayer,
    build_conv_operator,
    conv_forward,
    conv_solve_latents,
    conv_solve_weights,
    extract_patches,
    init_conv_layer,
    pool,
    unpool,
)
from starnet.errors import DeterminednessViolation, InsufficientData, ShapeMismatch

HALF = Activation(0.5)
ONE = Activation(1.0)


def test_unpool_figure_example():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1)
    np.testing.assert_array_equal(unpool(x, 2), [[[1.0, 2.0], [3.0, 4.0]]])
    np.testing.assert_array_equal(pool(unpool(x, 2), 2), x)


def test_unpool_factor_one_is_identity():
    x = np.random.default_rng(0).standard_normal((3, 4, 5))
    assert np.array_equal(unpool(x, 1), x)
    assert np.array_equal(pool(x, 1), x)


def test_unpool_against_index_loop():
    x = np.random.default_rng(1).standard_normal((8, 2, 2))
    y = unpool(x, 2)
    assert y.shape == (2, 4, 4)
    np.testing.assert_array_equal(y, loop_unpool(x, 2))
    assert np.array_equal(pool(y, 2), x)
    assert np.array_equal(unpool(pool(y, 2), 2), y)


def test_pool_unpool_batched_round_trip():
    x = np.random.default_rng(2).standard_normal((5, 12, 3, 4))
    assert np.array_equal(pool(unpool(x, 2), 2), x)
    z = np.random.default_rng(3).standard_normal((5, 2, 9, 6))
    assert np.array_equal(unpool(pool(z, 3), 3), z)


def test_unpool_rejects_bad_channels():
    with pytest.raises(ShapeMismatch):
        unpool(np.zeros((3, 2, 2)), 2)
    with pytest.raises(ShapeMismatch):
        pool(np.zeros((1, 3, 4)), 2)


def test_patches_single_pixel():
    p = extract_patches(np.array([[[7.0]]]), 1)
    np.testing.assert_array_equal(p, [[7.0]])


def test_patch_count_mnist_geometry():
    p = extract_patches(np.zeros((1, 28, 28)), 7)
    count = sum(1 for _ in range(28 + 7 - 1) for _ in range(28 + 7 - 1))
    assert p.shape == (count, 49) == (1156, 49)


def test_corner_patch_has_one_tap():
    p = extract_patches(np.ones((1, 2, 2)), 3)
    assert p.shape == (16, 9)
    assert np.count_nonzero(p[0]) == 1 and p[0, -1] == 1.0
    assert np.count_nonzero(p[15]) == 1 and p[15, 0] == 1.0


def test_operator_scalar_kernel():
    spec = ConvSpec(1, 3, 3, 1, 1, 1)
    a = build_conv_operator(ConvUnpoolLayer(spec, np.array([[2.5]])))
    np.testing.assert_array_equal(a, 2.5 * np.eye(9))


def test_operator_delta_kernel_is_embedding():
    spec = ConvSpec(1, 3, 4, 3, 1, 1)
    kern = np.zeros((1, 9))
    kern[0, 4] = 1.0
    a = build_conv_operator(ConvUnpoolLayer(spec, kern))
    assert set(np.unique(a)) <= {0.0, 1.0}
    assert np.all(a.sum(axis=1) <= 1) and np.all(a.sum(axis=0) == 1)


def test_operator_matches_loop_on_basis_images():
    rng = np.random.default_rng(4)
    spec = ConvSpec(1, 2, 2, 3, 1, 1)
    layer = ConvUnpoolLayer(spec, rng.standard_normal((1, 9)))
    a = build_conv_operator(layer)
    assert a.shape == (16, 4)
    for col in range(4):
        e = np.zeros(4)
        e[col] = 1.0
        np.testing.assert_allclose(a[:, col], loop_conv_full(e.reshape(1, 2, 2), layer.kernels, 3).ravel(), atol=1e-15)


@pytest.mark.parametrize("seed", range(6))
def test_forward_paths_agree(seed):
    rng = np.random.default_rng(seed)
    c, h, w, k = rng.integers(1, 3), rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 4)
    spec = ConvSpec(int(c), int(h), int(w), int(k), 4 * int(rng.integers(1, 3)), 2)
    layer = ConvUnpoolLayer(spec, rng.standard_normal((spec.pre_shuffle_channels, spec.kernel_params)))
    x = rng.standard_normal(spec.in_shape)
    loops = loop_conv_full(x, layer.kernels, spec.kernel_size)
    np.testing.assert_allclose(layer.conv_full(x), loops, atol=1e-12)
    a = build_conv_operator(layer)
    np.testing.assert_allclose((a @ x.ravel()).reshape(loops.shape), loops, atol=1e-12)
    np.testing.assert_allclose(conv_forward(layer, HALF, x), HALF.apply(unpool(loops, 2)), atol=1e-12)


def test_identity_conv():
    spec = ConvSpec(1, 4, 4, 1, 1, 1)
    layer = ConvUnpoolLayer(spec, np.ones((1, 1)))
    x = np.random.default_rng(5).standard_normal((1, 4, 4))
    assert np.array_equal(conv_forward(layer, ONE, x), x)
    got, norm = conv_solve_latents(layer, ONE, x)
    np.testing.assert_allclose(got, x, atol=1e-14)
    assert norm < 1e-14


def test_delta_kernel_shifts():
    spec = ConvSpec(1, 3, 3, 2, 1, 1)
    kern = np.array([[1.0, 0.0, 0.0, 0.0]])  # top-left tap
    layer = ConvUnpoolLayer(spec, kern)
    x = np.arange(9.0).reshape(1, 3, 3)
    out = conv_forward(layer, ONE, x)
    assert out.shape == (1, 4, 4)
    np.testing.assert_array_equal(out[0, 1:, 1:], x[0])
    assert np.all(out[0, 0] == 0) and np.all(out[0, :, 0] == 0)


def test_planted_latent_recovery():
    rng = np.random.default_rng(6)
    spec = ConvSpec(2, 5, 5, 3, 4, 2)
    layer = init_conv_layer(spec, rng)
    x = rng.standard_normal((7, *spec.in_shape))
    got, norms = conv_solve_latents(layer, HALF, conv_forward(layer, HALF, x))
    assert np.abs(got - x).max() < 1e-8 and norms.max() < 1e-8


def test_noisy_target_residual_matches_normal_equations():
    rng = np.random.default_rng(7)
    spec = ConvSpec(1, 4, 4, 3, 4, 2)
    layer = init_conv_layer(spec, rng)
    x = rng.standard_normal(spec.in_shape)
    y = conv_forward(layer, ONE, x) + 0.01 * rng.standard_normal(spec.out_shape)
    got, norm = conv_solve_latents(layer, ONE, y)
    a = build_conv_operator(layer)
    b = pool(y, 2).ravel()
    oracle = normal_equations_solve(a, b)
    np.testing.assert_allclose(got.ravel(), oracle, atol=1e-9)
    assert norm == pytest.approx(np.linalg.norm(a @ oracle - b), rel=1e-8)


def test_determinedness_violation():
    spec = ConvSpec(8, 4, 4, 1, 4, 2)  # 4*16 equations for 8*16 unknowns
    layer = ConvUnpoolLayer(spec, np.random.default_rng(0).standard_normal((4, 8)))
    with pytest.raises(DeterminednessViolation):
        layer.factorize()


def test_operator_rows_at_least_cols_when_channels_allow():
    rng = np.random.default_rng(8)
    for _ in range(20):
        u = int(rng.integers(1, 3))
        c_in = int(rng.integers(1, 4))
        c_out = int(rng.integers(-(-c_in // (u * u)), c_in + 1))
        spec = ConvSpec(c_in, int(rng.integers(1, 6)), int(rng.integers(1, 6)), int(rng.integers(1, 4)), c_out * u * u, u)
        a = build_conv_operator(ConvUnpoolLayer(spec, rng.standard_normal((spec.pre_shuffle_channels, spec.kernel_params))))
        assert a.shape[0] >= a.shape[1]


def _planted_maps(seed, n=50, spec=ConvSpec(2, 8, 8, 3, 4, 2)):
    rng = np.random.default_rng(seed)
    layer = init_conv_layer(spec, rng)
    x = rng.standard_normal((n, *spec.in_shape))
    return spec, layer, x.reshape(n, -1), conv_forward(layer, HALF, x).reshape(n, -1)


def test_planted_kernel_recovery():
    spec, layer, x, y = _planted_maps(9)
    got = conv_solve_weights(spec, x, HALF, y)
    assert np.abs(got.kernels - layer.kernels).max() < 1e-6


def test_chunk_average_equals_direct_on_consistent_system():
    spec, layer, x, y = _planted_maps(10)
    direct = conv_solve_weights(spec, x, HALF, y)
    chunked = conv_solve_weights(spec, x, HALF, y, chunks=4)
    assert np.abs(chunked.kernels - direct.kernels).max() < 1e-8
    threaded = conv_solve_weights(spec, x, HALF, y, chunks=4, workers=3)
    assert np.array_equal(threaded.kernels, chunked.kernels)


def test_any_sufficient_sample_recovers_planted_kernel():
    spec, layer, x, y = _planted_maps(11)
    for seed in range(5):
        got = conv_solve_weights(spec, x, HALF, y, sample_size=3, rng=np.random.default_rng(seed))
        assert np.abs(got.kernels - layer.kernels).max() < 1e-6


def test_weight_solve_needs_enough_equations():
    spec = ConvSpec(4, 1, 1, 5, 4, 2)  # 25 patches per image, 100 unknowns
    rng = np.random.default_rng(12)
    x = rng.standard_normal((3, spec.in_dim))
    y = rng.standard_normal((3, 1 * 10 * 10))
    with pytest.raises(InsufficientData):
        conv_solve_weights(spec, x, HALF, y)


def test_layer_construction_checks():
    with pytest.raises(ShapeMismatch):
        ConvUnpoolLayer(ConvSpec(1, 2, 2, 3, 3, 2), np.zeros((3, 9)))
    with pytest.raises(ShapeMismatch):
        ConvUnpoolLayer(ConvSpec(1, 2, 2, 3, 4, 2), np.zeros((4, 8)))
