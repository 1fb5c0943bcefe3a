import numpy as np
import pytest

from neurofuscate import ir, watermark as wm
from neurofuscate.obfuscate import ObfuscationConfig, inject_campaign
from neurofuscate.verify import (
    THETA_PRESETS,
    VerdictReport,
    ber,
    max_first_resize,
    scaled_ber,
    verify,
)

from helpers import small_cnn, small_mlp


def bs(text01):
    return wm.BitString.from01(text01)


# --- ber ---------------------------------------------------------------------


def test_ber_examples():
    assert ber(bs("10110"), bs("10110")) == 0.0
    assert ber(bs("10110"), bs("10010")) == 0.2
    s = bs("10110")
    comp = bs("".join("1" if b == "0" else "0" for b in s.to01()))
    assert ber(s, comp) == 1.0


def test_ber_length_mismatch():
    with pytest.raises(ValueError):
        ber(bs("101"), bs("1011"))


def test_ber_is_a_metric():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a, b, c = (wm.BitString(tuple(rng.integers(0, 2, 24))) for _ in range(3))
        assert ber(a, b) == ber(b, a)
        assert (ber(a, b) == 0.0) == (a.bits == b.bits)
        assert ber(a, c) <= ber(a, b) + ber(b, c) + 1e-12


# --- scaled ber ----------------------------------------------------------------


def test_scaled_ber_fixed_point_is_exact():
    for theta in (0.1, 0.345, 0.4386, 0.77):
        assert scaled_ber(theta, theta) == 0.5


def test_scaled_ber_paper_threshold_case():
    assert scaled_ber(0.30, 0.4386) == pytest.approx(0.342, abs=1e-3)


def test_scaled_ber_clips_at_one():
    assert scaled_ber(0.9, 0.345) == 1.0


def test_scaled_ber_monotone():
    grid = np.linspace(0, 1, 101)
    vals = [scaled_ber(float(r), 0.4268) for r in grid]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_scaled_ber_theta_guard():
    with pytest.raises(ValueError):
        scaled_ber(0.2, 0.0)
    with pytest.raises(ValueError):
        scaled_ber(0.2, 1.0)


# --- max-first -------------------------------------------------------------------


def test_max_first_hand_scores():
    # neuron scores 1.0, 0.02, 0.6 -> target 2 removes neuron 1
    m = ir.Model(
        layers=(
            ir.FullyConnected(id=0, weight=np.array([[0.4], [0.005], [0.25]], np.float32)),
            ir.ReLU(id=1),
            ir.FullyConnected(id=2, weight=np.array([[0.6, 0.015, 0.35]], np.float32)),
        ),
        input_shape=(1,),
    )
    out, removed = max_first_resize(m, {0: 2})
    assert removed == {0: (1,)}
    np.testing.assert_array_equal(out.layers[0].weight, np.array([[0.4], [0.25]], np.float32))
    np.testing.assert_array_equal(out.layers[2].weight, np.array([[0.6, 0.35]], np.float32))


def test_max_first_identity_at_target():
    m = small_mlp(seed=1)
    out, removed = max_first_resize(m, {0: 16, 2: 16, 4: 12})
    assert removed == {}
    assert ir.models_identical(m, out)


def test_max_first_target_too_large():
    m = small_mlp(seed=1)
    with pytest.raises(ir.StructuralError, match="exceeds"):
        max_first_resize(m, {0: 17})


def test_max_first_removes_zero_dummies_exactly():
    m = small_cnn(seed=2)
    cfg = ObfuscationConfig(
        alpha=0.25, mix=(1.0, 0.0, 0.0), enable_permutation=False, enable_rescaling=False, seed=3
    )
    attacked, plan = inject_campaign(m, cfg)
    targets = {0: 8, 2: 8}
    restored, removed = max_first_resize(attacked, targets)
    assert ir.models_identical(m, restored)
    for layer_id, drop in removed.items():
        assert set(drop) == plan.dummy_positions(layer_id)


# --- verify ---------------------------------------------------------------------


def test_verify_unattacked_round_trip():
    m = small_cnn(seed=5)
    message = wm.BitString.random(64, 1)
    marked, key = wm.embed(m, "uchida_weight", message, seed=2, target_layer_ids=(2,))
    report = verify(marked, key, message, reference=marked)
    assert report.raw_ber == 0.0
    assert report.decision == "retained"
    assert report.error_handling == "none"
    assert report.utility_delta == 0.0


def test_verify_after_campaign_handles_and_flags_removal():
    m = small_cnn(seed=7)
    message = wm.BitString.random(64, 3)
    marked, key = wm.embed(m, "uchida_weight", message, seed=4, target_layer_ids=(2,))
    attacked, _ = inject_campaign(marked, ObfuscationConfig(alpha=0.2, seed=5))
    report = verify(attacked, key, message, reference=marked)
    assert report.error_handling == "max_first"
    assert report.neurons_removed_by_handling > 0
    assert report.utility_delta is not None and report.utility_delta <= 1e-4
    assert report.decision == "removed"
    assert report.scaled_ber == scaled_ber(report.raw_ber, THETA_PRESETS["uchida_weight"])


def test_verify_passport_after_heavy_campaign_near_random():
    from helpers import passport_cnn

    m = passport_cnn(seed=15, filters=64)
    message = wm.BitString.random(64, 9)
    marked, key = wm.embed(m, "passport_sign", message, seed=10, target_layer_ids=(2,))
    attacked, _ = inject_campaign(marked, ObfuscationConfig(alpha=0.5, seed=11))
    report = verify(attacked, key, message, reference=marked)
    assert report.error_handling == "max_first"
    assert 0.3 <= report.raw_ber <= 0.7  # near random after a 50% campaign
    assert report.utility_delta <= 1e-4


def test_verify_greedy_needs_no_handling():
    m = small_cnn(seed=9)
    message = wm.BitString.random(64, 5)
    marked, key = wm.embed(m, "greedy_residual", message, seed=6, target_layer_ids=(2,))
    attacked, _ = inject_campaign(marked, ObfuscationConfig(alpha=0.2, seed=7))
    report = verify(attacked, key, message)
    assert report.error_handling == "none"
    assert report.extracted is not None and len(report.extracted) == 64


def test_verify_never_raises_on_hopeless_input():
    m = small_mlp(seed=11)
    key = wm.make_key(small_cnn(seed=1), "uchida_weight", 16, seed=0, target_layer_ids=(2,))
    report = verify(m, key, wm.BitString.random(16, 0))
    assert isinstance(report, VerdictReport)
    assert report.decision == "inexecutable"


def test_verify_never_raises_on_mismatched_message_or_reference():
    m = small_cnn(seed=13)
    message = wm.BitString.random(32, 7)
    marked, key = wm.embed(m, "uchida_weight", message, seed=8, target_layer_ids=(2,))
    # message length disagrees with the key
    report = verify(marked, key, wm.BitString.random(16, 0))
    assert report.decision == "inexecutable" and "bits" in report.note
    # reference with a different input shape cannot yield a utility delta
    report = verify(marked, key, message, reference=small_mlp(seed=1))
    assert report.utility_delta is None
    assert report.raw_ber == 0.0


def test_verify_report_json_is_stable():
    m = small_cnn(seed=13)
    message = wm.BitString.random(32, 7)
    marked, key = wm.embed(m, "uchida_weight", message, seed=8, target_layer_ids=(2,))
    a = verify(marked, key, message).to_json()
    b = verify(marked, key, message).to_json()
    assert a == b
