import numpy as np
import pytest

from neurofuscate import ir
from neurofuscate.inference import (
    equivalence_check,
    forward,
    forward_with_trace,
    sample_inputs,
)

from helpers import reference_forward, residual_cnn, small_cnn, small_mlp


def test_fc_identity_then_relu():
    m = ir.Model(
        layers=(
            ir.FullyConnected(id=0, weight=np.eye(2, dtype=np.float32)),
            ir.ReLU(id=1),
        ),
        input_shape=(2,),
    )
    np.testing.assert_array_equal(forward(m, np.array([3.0, -2.0], np.float32)),
                                  np.array([3.0, 0.0], np.float32))


def test_one_by_one_conv_doubles():
    m = ir.Model(
        layers=(ir.Conv2D(id=0, weight=np.full((1, 1, 1, 1), 2.0, np.float32)),),
        input_shape=(1, 2, 2),
    )
    out = forward(m, np.ones((1, 2, 2), np.float32))
    np.testing.assert_array_equal(out, np.full((1, 2, 2), 2.0, np.float32))


@pytest.mark.parametrize("builder,seed", [(small_cnn, 0), (small_cnn, 1), (residual_cnn, 2)])
def test_engine_matches_straight_loop_reference(builder, seed):
    m = builder(seed=seed)
    for x in sample_inputs(m.input_shape, 3, seed=seed + 10):
        got = forward(m, x).astype(np.float64)
        want = reference_forward(m, x)
        assert np.max(np.abs(got - want)) <= 1e-6


def test_strided_padded_conv_matches_reference():
    rng = np.random.default_rng(3)
    m = ir.Model(
        layers=(
            ir.Conv2D(id=0, weight=rng.normal(0, 0.3, (4, 2, 3, 3)).astype(np.float32),
                      bias=rng.normal(0, 0.1, 4).astype(np.float32), stride=2, pad=1),
        ),
        input_shape=(2, 9, 9),
    )
    x = rng.standard_normal((2, 9, 9)).astype(np.float32)
    assert np.max(np.abs(forward(m, x).astype(np.float64) - reference_forward(m, x))) <= 1e-6


def test_trace_covers_every_layer_and_ends_at_output():
    m = small_cnn(seed=4)
    x = sample_inputs(m.input_shape, 1, seed=0)[0]
    out, trace = forward_with_trace(m, x)
    assert set(trace) == {layer.id for layer in m.layers}
    np.testing.assert_array_equal(trace[m.layers[-1].id], out)


def test_trace_prefix_suffix_consistency():
    m = small_cnn(seed=9)
    shapes = ir.output_shapes(m)
    x = sample_inputs(m.input_shape, 1, seed=1)[0]
    out, trace = forward_with_trace(m, x)
    for cut in range(len(m.layers) - 1):
        suffix = ir.Model(layers=m.layers[cut + 1:], input_shape=shapes[m.layers[cut].id])
        resumed = forward(suffix, trace[m.layers[cut].id])
        np.testing.assert_array_equal(resumed, out)


def test_forward_shape_mismatch():
    m = small_mlp()
    with pytest.raises(ir.StructuralError):
        forward(m, np.zeros(5, np.float32))


def test_determinism_bit_identical():
    m = residual_cnn(seed=6)
    x = sample_inputs(m.input_shape, 1, seed=2)[0]
    a, b = forward(m, x), forward(m, x)
    assert np.array_equal(a.view(np.uint32), b.view(np.uint32))


def test_equivalence_model_vs_itself():
    m = small_cnn(seed=1)
    rep = equivalence_check(m, m, n_samples=20, seed=0, tol=1e-4)
    assert rep.max_abs_dev == 0.0 and rep.passed


def test_equivalence_detects_perturbation():
    m = small_mlp(seed=2)
    w = m.layers[0].weight.copy()
    w[0, 0] += 0.1
    layers = list(m.layers)
    layers[0] = ir.FullyConnected(id=layers[0].id, weight=w)
    rep = equivalence_check(m, m.with_layers(layers), n_samples=50, seed=0, tol=1e-5)
    assert not rep.passed


def test_equivalence_requires_same_input_shape():
    with pytest.raises(ir.StructuralError):
        equivalence_check(small_mlp(), small_cnn(), n_samples=1, seed=0)


def test_relu_positive_homogeneity_elementwise_exact():
    rng = np.random.default_rng(0)
    z = rng.standard_normal(1000).astype(np.float32)
    for lam in (0.5, 2.0, 3.7, 1e3):
        lam = np.float32(lam)
        left = np.maximum(lam * z, np.float32(0))
        right = lam * np.maximum(z, np.float32(0))
        assert np.array_equal(left, right)
