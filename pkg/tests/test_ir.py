import numpy as np
import pytest

from neurofuscate import ir
from neurofuscate.inference import forward, sample_inputs

from helpers import residual_cnn, small_cnn, small_mlp


def test_validate_well_formed_mlp():
    assert ir.validate(small_mlp()) == []


def test_validate_dim_mismatch():
    m = small_mlp()
    bad = list(m.layers)
    # fc declaring in=4 fed by a layer with out=3
    bad[-1] = ir.FullyConnected(id=99, weight=np.zeros((2, 4), np.float32))
    violations = ir.validate(m.with_layers(bad))
    assert len(violations) == 1
    assert violations[0].rule == "shape-mismatch"


def test_validate_sigma_zero():
    norm = ir.Norm(
        id=1,
        gamma=np.ones(3, np.float32),
        beta=np.zeros(3, np.float32),
        mu=np.zeros(3, np.float32),
        sigma=np.array([1.0, 0.0, 1.0], np.float32),
    )
    m = ir.Model(
        layers=(ir.FullyConnected(id=0, weight=np.eye(3, dtype=np.float32)), norm),
        input_shape=(3,),
    )
    rules = [v.rule for v in ir.validate(m)]
    assert rules == ["sigma-positive"]


def test_validate_residual_rules():
    m = residual_cnn()
    assert ir.validate(m) == []
    # source after the add
    layers = list(m.layers)
    layers[5] = ir.ResidualAdd(id=5, source=8)
    assert any(v.rule == "shape-mismatch" for v in ir.validate(m.with_layers(layers)))


def test_fold_norm_identity_params():
    m = small_cnn(seed=3, with_norm=True)
    norm = m.layers[1]
    neutral = ir.Norm(
        id=norm.id,
        gamma=np.ones(norm.channels, np.float32),
        beta=np.zeros(norm.channels, np.float32),
        mu=np.zeros(norm.channels, np.float32),
        sigma=np.ones(norm.channels, np.float32),
    )
    layers = list(m.layers)
    layers[1] = neutral
    folded = ir.fold_norm(m.with_layers(layers))
    assert all(not isinstance(l, ir.Norm) for l in folded.layers)
    np.testing.assert_array_equal(folded.layers[0].weight, m.layers[0].weight)


def test_fold_norm_hand_computed():
    # 1x1 conv w=2 with gamma=3, sigma=2, mu=0, beta=0 folds to weight 3.0
    conv = ir.Conv2D(id=0, weight=np.full((1, 1, 1, 1), 2.0, np.float32))
    norm = ir.Norm(
        id=1,
        gamma=np.array([3.0], np.float32),
        beta=np.array([0.0], np.float32),
        mu=np.array([0.0], np.float32),
        sigma=np.array([2.0], np.float32),
    )
    m = ir.Model(layers=(conv, norm), input_shape=(1, 2, 2))
    folded = ir.fold_norm(m)
    assert folded.layers[0].weight[0, 0, 0, 0] == pytest.approx(3.0)
    assert folded.layers[0].bias[0] == pytest.approx(0.0)


def test_fold_norm_bias_algebra():
    # beta=5, gamma=2, mu=3, sigma=4, conv bias 1: b' = beta + gamma*(b-mu)/sigma = 4.0
    conv = ir.Conv2D(
        id=0,
        weight=np.full((1, 1, 1, 1), 2.0, np.float32),
        bias=np.array([1.0], np.float32),
    )
    norm = ir.Norm(
        id=1,
        gamma=np.array([2.0], np.float32),
        beta=np.array([5.0], np.float32),
        mu=np.array([3.0], np.float32),
        sigma=np.array([4.0], np.float32),
    )
    m = ir.Model(layers=(conv, norm), input_shape=(1, 2, 2))
    folded = ir.fold_norm(m)
    assert folded.layers[0].bias[0] == pytest.approx(5.0 + 2.0 * (1.0 - 3.0) / 4.0)


def test_fold_norm_forward_equivalence():
    m = small_cnn(seed=7, with_norm=True)
    folded = ir.fold_norm(m)
    worst = 0.0
    for x in sample_inputs(m.input_shape, 100, seed=11):
        before = forward(m, x).astype(np.float64)
        after = forward(folded, x).astype(np.float64)
        scale = 1.0 + np.max(np.abs(before))
        worst = max(worst, float(np.max(np.abs(before - after)) / scale))
    assert worst <= 1e-5


def test_fold_norm_requires_linear_host():
    norm = ir.Norm(
        id=0,
        gamma=np.ones(3, np.float32),
        beta=np.zeros(3, np.float32),
        mu=np.zeros(3, np.float32),
        sigma=np.ones(3, np.float32),
    )
    m = ir.Model(layers=(norm,), input_shape=(3,))
    with pytest.raises(ir.StructuralError):
        ir.fold_norm(m)


@pytest.mark.parametrize("builder", [small_mlp, small_cnn, residual_cnn])
def test_save_load_round_trip(tmp_path, builder):
    m = builder(seed=5)
    ir.save(m, tmp_path / "m")
    again = ir.load(tmp_path / "m")
    assert ir.models_identical(m, again)


def test_save_load_with_norm_and_metadata(tmp_path):
    m = small_cnn(seed=5, with_norm=True)
    m = ir.Model(layers=m.layers, input_shape=m.input_shape, metadata={"note": "x"})
    ir.save(m, tmp_path / "m")
    assert ir.models_identical(m, ir.load(tmp_path / "m"))


def test_load_truncated_blob(tmp_path):
    m = small_mlp()
    ir.save(m, tmp_path / "m")
    blob = tmp_path / "m" / "layer0.weight.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(ir.LoadError, match="layer0.weight.bin"):
        ir.load(tmp_path / "m")


def test_load_missing_blob(tmp_path):
    m = small_mlp()
    ir.save(m, tmp_path / "m")
    (tmp_path / "m" / "layer2.weight.bin").unlink()
    with pytest.raises(ir.LoadError, match="missing blob"):
        ir.load(tmp_path / "m")


def test_load_non_finite(tmp_path):
    m = small_mlp()
    ir.save(m, tmp_path / "m")
    blob = tmp_path / "m" / "layer0.weight.bin"
    data = np.frombuffer(blob.read_bytes(), dtype="<f4").copy()
    data[0] = np.nan
    blob.write_bytes(data.tobytes())
    with pytest.raises(ir.LoadError, match="non-finite"):
        ir.load(tmp_path / "m")


def test_load_corrupt_manifest(tmp_path):
    m = small_mlp()
    ir.save(m, tmp_path / "m")
    (tmp_path / "m" / "manifest.json").write_text("{not json")
    with pytest.raises(ir.LoadError, match="corrupt manifest"):
        ir.load(tmp_path / "m")


def test_save_is_deterministic(tmp_path):
    m = small_cnn(seed=2, with_norm=True)
    ir.save(m, tmp_path / "a")
    ir.save(m, tmp_path / "b")
    for f in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_params_are_read_only():
    m = small_mlp()
    with pytest.raises(ValueError):
        m.layers[0].weight[0, 0] = 1.0


def random_chain_model(rng):
    """Random valid layer chain: convs with varied geometry, optional norm/bias,
    then flatten and fc layers."""
    c, hw = int(rng.integers(1, 4)), int(rng.integers(7, 14))
    layers, lid = [], 0
    shape = (c, hw, hw)
    for _ in range(int(rng.integers(1, 3))):
        out_c = int(rng.integers(2, 7))
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.choice([1, 2]))
        pad = k // 2
        if (shape[1] + 2 * pad - k) // stride + 1 < 1:
            continue
        bias = rng.normal(0, 0.1, out_c).astype(np.float32) if rng.random() < 0.5 else None
        layers.append(ir.Conv2D(id=lid, weight=rng.normal(0, 0.3, (out_c, shape[0], k, k))
                                .astype(np.float32), bias=bias, stride=stride, pad=pad))
        shape = ((shape[1] + 2 * pad - k) // stride + 1,)
        shape = (out_c, shape[0], shape[0])
        lid += 1
        if rng.random() < 0.5:
            layers.append(ir.Norm(
                id=lid,
                gamma=rng.normal(1, 0.2, out_c).astype(np.float32),
                beta=rng.normal(0, 0.1, out_c).astype(np.float32),
                mu=rng.normal(0, 0.1, out_c).astype(np.float32),
                sigma=rng.uniform(0.5, 1.5, out_c).astype(np.float32),
            ))
            lid += 1
        layers.append(ir.ReLU(id=lid)); lid += 1
    layers.append(ir.Flatten(id=lid)); lid += 1
    dim = int(np.prod(shape))
    for _ in range(int(rng.integers(1, 3))):
        out_d = int(rng.integers(2, 8))
        bias = rng.normal(0, 0.1, out_d).astype(np.float32) if rng.random() < 0.5 else None
        layers.append(ir.FullyConnected(id=lid, weight=rng.normal(0, 0.3, (out_d, dim))
                                        .astype(np.float32), bias=bias))
        dim = out_d
        lid += 1
    return ir.Model(layers=tuple(layers), input_shape=(c, hw, hw))


def test_round_trip_fuzz_random_chains(tmp_path):
    rng = np.random.default_rng(99)
    for i in range(10):
        m = random_chain_model(rng)
        assert ir.validate(m) == []
        ir.save(m, tmp_path / f"m{i}")
        again = ir.load(tmp_path / f"m{i}")
        assert ir.models_identical(m, again)
        x = rng.standard_normal(m.input_shape).astype(np.float32)
        np.testing.assert_array_equal(forward(m, x), forward(again, x))
