import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from qsentry import attacks
from qsentry.attacks import PoisonPlan, TriggerSpec
from qsentry.data import LabeledSample
from qsentry.errors import ConfigError, DomainError
from qsentry.model import CircuitSpec
from tests import oracles

images = hnp.arrays(np.float64, 256, elements=st.floats(0, 1))


def dataset(n_source, n_target, seed=0):
    rng = np.random.default_rng(seed)
    return [LabeledSample(rng.random(256), c, c, False, i)
            for i, c in enumerate([0] * n_source + [1] * n_target)]


# -- patch ------------------------------------------------------------------


def test_patch_three_by_three_upper_left():
    out = attacks.apply_patch_trigger(np.zeros(256), TriggerSpec("patch", patch_size=3))
    assert np.flatnonzero(out).tolist() == [0, 1, 2, 16, 17, 18, 32, 33, 34]
    assert set(out[out > 0]) == {1.0}


def test_patch_default_is_four():
    out = attacks.apply_patch_trigger(np.zeros(256), TriggerSpec("patch"))
    assert np.count_nonzero(out) == 16


@given(images, st.integers(1, 16))
@settings(max_examples=40)
def test_patch_idempotent_and_local(x, s):
    spec = TriggerSpec("patch", patch_size=s, intensity=0.7)
    once = attacks.apply_patch_trigger(x, spec)
    np.testing.assert_array_equal(attacks.apply_patch_trigger(once, spec), once)
    mask = np.zeros((16, 16), bool)
    mask[:s, :s] = True
    mask = mask.reshape(-1)
    np.testing.assert_array_equal(once[~mask], x[~mask])
    assert np.all(once[mask] == 0.7)


def test_patch_full_image_constant():
    out = attacks.apply_patch_trigger(np.random.default_rng(0).random(256), TriggerSpec("patch", patch_size=16))
    assert np.all(out == 1.0)


def test_patch_bounds():
    with pytest.raises(ConfigError):
        attacks.apply_patch_trigger(np.zeros(256), TriggerSpec("patch", patch_size=4, location=(13, 0)))
    out = attacks.apply_patch_trigger(np.zeros(256), TriggerSpec("patch", patch_size=2, location=(14, 14)))
    assert np.flatnonzero(out).tolist() == [238, 239, 254, 255]


# -- blend ------------------------------------------------------------------


def test_blend_zero_and_one():
    rng = np.random.default_rng(1)
    x, pattern = rng.random(256), rng.random(256)
    np.testing.assert_array_equal(
        attacks.apply_blend_trigger(x, TriggerSpec("blend", blend_lambda=0.0, pattern=pattern)), x)
    full = attacks.apply_blend_trigger(x, TriggerSpec("blend", blend_lambda=1.0, pattern=pattern))
    want = oracles.convolve2d(pattern.reshape(16, 16), 1.5, "constant").reshape(-1)
    np.testing.assert_allclose(full, np.clip(want, 0, 1), atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_blend_matches_convolution_oracle(seed):
    x = np.random.default_rng(seed).random(256)
    out = attacks.apply_blend_trigger(x, TriggerSpec("blend", pattern=x))
    want = 0.7 * x + 0.3 * oracles.convolve2d(x.reshape(16, 16), 1.5, "constant").reshape(-1)
    np.testing.assert_allclose(out, np.clip(want, 0, 1), atol=1e-12)


def test_blend_needs_pattern():
    with pytest.raises(ConfigError):
        attacks.apply_blend_trigger(np.zeros(256), TriggerSpec("blend"))


def test_blend_pattern_is_seeded_target_exemplar():
    data = dataset(5, 5)
    a = attacks.with_blend_pattern(TriggerSpec("blend"), data, seed=3)
    b = attacks.with_blend_pattern(TriggerSpec("blend"), data, seed=3)
    np.testing.assert_array_equal(a.pattern, b.pattern)
    assert any(np.array_equal(a.pattern, s.features) for s in data if s.true_label == 1)


# -- sinusoidal ---------------------------------------------------------------


def test_sinusoidal_zero_amplitude_identity():
    x = np.random.default_rng(2).random(256)
    np.testing.assert_array_equal(attacks.apply_sinusoidal_trigger(x, TriggerSpec("sinusoidal", sin_amplitude=0.0)), x)


def test_sinusoidal_matches_convolution_oracle():
    x = np.full(256, 0.5)
    out = attacks.apply_sinusoidal_trigger(x, TriggerSpec("sinusoidal")).reshape(16, 16)
    raw = np.tile(np.sin(2 * np.pi * np.arange(16) / 16), (16, 1))
    filtered = oracles.convolve2d(raw, 1.0, "wrap")
    np.testing.assert_allclose(out, np.clip(0.5 + 0.2 * filtered, 0, 1), atol=1e-12)
    # column 0 sits at zero phase; a symmetric kernel on a wrapped odd grating keeps it at zero
    np.testing.assert_allclose(out[:, 0] - 0.5, 0.2 * filtered[:, 0], atol=1e-12)
    assert abs(filtered[0, 0]) < 1e-12


@given(images, st.sampled_from(["patch", "blend", "sinusoidal"]), st.floats(0, 2))
@settings(max_examples=60)
def test_triggers_stay_in_unit_range(x, kind, amp):
    spec = TriggerSpec(kind, intensity=amp, sin_amplitude=amp, blend_lambda=min(amp, 1.0), pattern=x[::-1].copy())
    out = attacks.apply_trigger(x, spec)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_trigger_spec_validation():
    for bad in (dict(kind="warp"), dict(kind="blend", blend_lambda=1.5), dict(kind="sinusoidal", sin_amplitude=-1),
                dict(kind="patch", patch_size=0), dict(kind="patch", target_class=7)):
        with pytest.raises(ConfigError):
            TriggerSpec(**bad)


# -- QTrojan ----------------------------------------------------------------


def test_qtrojan_same_state_is_identity_insertion():
    s = dataset(1, 1)[1]
    spec = attacks.build_qtrojan(CircuitSpec(), s, s)
    assert spec.trojan_angles == (0.0,) * 8


def test_qtrojan_orthogonal_states_give_pi():
    a = np.zeros(256)
    a[0] = 1
    b = np.zeros(256)
    b[1] = 1
    spec = attacks.build_qtrojan(CircuitSpec(), LabeledSample(b, 1, 1), LabeledSample(a, 0, 0))
    np.testing.assert_allclose(spec.trojan_angles, np.pi)


def test_qtrojan_needs_exemplar():
    with pytest.raises(ConfigError):
        attacks.build_qtrojan(CircuitSpec(), None, dataset(1, 0)[0])


# -- poisoning --------------------------------------------------------------


def plan(rate, kind="patch", seed=0):
    return PoisonPlan(rate, TriggerSpec(kind, pattern=np.full(256, 0.5)), seed=seed)


def test_zero_rate_is_identity():
    data = dataset(10, 10)
    out = attacks.poison_dataset(data, plan(0.0))
    assert all(a is b for a, b in zip(out, data))


def test_five_thousand_at_one_percent():
    data = dataset(2500, 2500)
    out = attacks.poison_dataset(data, plan(0.01))
    assert sum(s.is_poisoned for s in out) == 50


def test_test_mode_composition():
    out = attacks.poison_dataset(dataset(500, 500), plan(0.01), mode="test")
    source = sum(1 for s in out if s.true_label == 0 and not s.is_poisoned)
    target = sum(1 for s in out if s.true_label == 1)
    backdoor = sum(s.is_poisoned for s in out)
    assert (source, target, backdoor) == (495, 500, 5)


@pytest.mark.parametrize("kind", attacks.ATTACKS)
@pytest.mark.parametrize("rate", [0.01, 0.05, 0.1, 0.37])
def test_poison_invariants(kind, rate):
    data = dataset(300, 300, seed=4)
    out = attacks.poison_dataset(data, plan(rate, kind, seed=5))
    assert sum(s.is_poisoned for s in out) == round(rate * 600)
    for before, after in zip(data, out):
        if after.is_poisoned:
            assert before.true_label == 0 and after.train_label == 1
            np.testing.assert_array_equal(after.features, attacks.apply_trigger(before.features, plan(rate, kind).trigger))
        else:
            assert after is before
    again = attacks.poison_dataset(data, plan(rate, kind, seed=5))
    assert [s.is_poisoned for s in again] == [s.is_poisoned for s in out]


def test_insufficient_source_samples():
    with pytest.raises(DomainError):
        attacks.poison_dataset(dataset(2, 20), plan(0.5))


def test_plan_validation():
    with pytest.raises(ConfigError):
        PoisonPlan(1.2, TriggerSpec("patch"))
    with pytest.raises(ConfigError):
        PoisonPlan(0.1, TriggerSpec("patch"), source_class=1, target_class=1)


def test_pgm_header_and_size():
    pgm = attacks.to_pgm(np.linspace(0, 1, 256))
    assert pgm.startswith(b"P5\n16 16\n255\n")
    assert len(pgm) == len(b"P5\n16 16\n255\n") + 256
    assert pgm[-1] == 255
