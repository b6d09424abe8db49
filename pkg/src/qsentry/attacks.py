"""Backdoor trigger generators and poisoning of train and test sets.

Data-level triggers act on 16x16 preprocessed features with values in
[0, 1].  The circuit-level trigger (QTrojan) leaves features alone; its
poisoned samples are the ones on which the trojan layer fires.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .data import CROP_SIDE, LabeledSample
from .errors import ConfigError, DomainError, ShapeError
from .model import CircuitSpec, build_qtrojan_angle
from .statevector import amplitude_encode

ATTACKS = ("patch", "blend", "sinusoidal", "qtrojan")


@dataclass(frozen=True)
class TriggerSpec:
    kind: str
    target_class: int = 1
    # patch
    patch_size: int = 4
    intensity: float = 1.0
    location: tuple = (0, 0)
    # blend
    blend_sigma: float = 1.5
    blend_lambda: float = 0.3
    pattern: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    # sinusoidal
    sin_amplitude: float = 0.2
    sin_frequency: float = 1.0
    sin_sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in ATTACKS:
            raise ConfigError(f"unknown trigger kind {self.kind!r}; expected one of {ATTACKS}")
        if self.target_class not in (0, 1):
            raise ConfigError(f"target_class must be 0 or 1, got {self.target_class}")
        if not 0.0 <= self.blend_lambda <= 1.0:
            raise ConfigError(f"blend_lambda must be in [0, 1], got {self.blend_lambda}")
        if self.sin_amplitude < 0:
            raise ConfigError(f"sin_amplitude must be >= 0, got {self.sin_amplitude}")
        if self.patch_size < 1:
            raise ConfigError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.blend_sigma <= 0 or self.sin_sigma <= 0:
            raise ConfigError("blur widths must be > 0")
        object.__setattr__(self, "location", tuple(int(v) for v in self.location))
        if self.pattern is not None:
            pattern = np.array(self.pattern, dtype=np.float64).reshape(-1)
            if pattern.shape != (CROP_SIDE * CROP_SIDE,):
                raise ShapeError(f"blend pattern must have 256 entries, got {pattern.shape}")
            pattern.flags.writeable = False
            object.__setattr__(self, "pattern", pattern)

    @property
    def is_data_level(self) -> bool:
        return self.kind != "qtrojan"


@dataclass(frozen=True)
class PoisonPlan:
    rate: float
    trigger: TriggerSpec
    source_class: int = 0
    target_class: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"poison rate must be in [0, 1), got {self.rate}")
        if self.source_class == self.target_class:
            raise ConfigError("source and target class must differ")
        if self.trigger.target_class != self.target_class:
            raise ConfigError("trigger and plan disagree on the target class")


def _as_image(features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.shape != (CROP_SIDE * CROP_SIDE,):
        raise ShapeError(f"features must have 256 entries, got shape {x.shape}")
    return x.reshape(CROP_SIDE, CROP_SIDE)


def gaussian_blur(image: np.ndarray, sigma: float, mode: str) -> np.ndarray:
    """Gaussian filter truncated at radius ceil(3 sigma)."""
    return ndimage.gaussian_filter(np.asarray(image, dtype=np.float64), sigma, mode=mode, radius=math.ceil(3 * sigma))


def apply_patch_trigger(features, spec: TriggerSpec) -> np.ndarray:
    if spec.kind != "patch":
        raise ConfigError(f"expected a patch trigger, got {spec.kind!r}")
    img = _as_image(features).copy()
    r, c = spec.location
    s = spec.patch_size
    if r < 0 or c < 0 or r + s > CROP_SIDE or c + s > CROP_SIDE:
        raise ConfigError(f"{s}x{s} patch at {spec.location} does not fit a {CROP_SIDE}x{CROP_SIDE} image")
    img[r:r + s, c:c + s] = min(1.0, max(0.0, spec.intensity))
    return img.reshape(-1)


def apply_blend_trigger(features, spec: TriggerSpec) -> np.ndarray:
    """Convex mix of the input with a blurred pattern image (zero padding at the border)."""
    if spec.kind != "blend":
        raise ConfigError(f"expected a blend trigger, got {spec.kind!r}")
    if spec.pattern is None:
        raise ConfigError("blend trigger has no pattern image")
    img = _as_image(features)
    blurred = gaussian_blur(spec.pattern.reshape(CROP_SIDE, CROP_SIDE), spec.blend_sigma, "constant")
    out = (1.0 - spec.blend_lambda) * img + spec.blend_lambda * blurred
    return np.clip(out, 0.0, 1.0).reshape(-1)


def sinusoidal_pattern(frequency: float) -> np.ndarray:
    """sin(2 pi f j / 16) along columns, constant down each column."""
    cols = np.arange(CROP_SIDE)
    row = np.sin(2.0 * np.pi * frequency * cols / CROP_SIDE)
    return np.tile(row, (CROP_SIDE, 1))


def apply_sinusoidal_trigger(features, spec: TriggerSpec) -> np.ndarray:
    """Add a Gaussian-filtered sine grating; the grating is periodic so the filter wraps."""
    if spec.kind != "sinusoidal":
        raise ConfigError(f"expected a sinusoidal trigger, got {spec.kind!r}")
    img = _as_image(features)
    grating = gaussian_blur(sinusoidal_pattern(spec.sin_frequency), spec.sin_sigma, "wrap")
    return np.clip(img + spec.sin_amplitude * grating, 0.0, 1.0).reshape(-1)


def apply_trigger(features, spec: TriggerSpec) -> np.ndarray:
    if spec.kind == "patch":
        return apply_patch_trigger(features, spec)
    if spec.kind == "blend":
        return apply_blend_trigger(features, spec)
    if spec.kind == "sinusoidal":
        return apply_sinusoidal_trigger(features, spec)
    return np.array(_as_image(features).reshape(-1))


def choose_exemplar(samples: Sequence[LabeledSample], cls: int, seed: int) -> LabeledSample:
    pool = [s for s in samples if s.true_label == cls and not s.is_poisoned]
    if not pool:
        raise DomainError(f"no clean samples of class {cls} to draw an exemplar from")
    return pool[int(np.random.default_rng(seed).integers(len(pool)))]


def with_blend_pattern(spec: TriggerSpec, samples: Sequence[LabeledSample], seed: int) -> TriggerSpec:
    """Attach a seed-chosen target-class exemplar as the blend pattern."""
    if spec.kind != "blend" or spec.pattern is not None:
        return spec
    return replace(spec, pattern=choose_exemplar(samples, spec.target_class, seed).features)


def build_qtrojan(spec_model: CircuitSpec, exemplar: Optional[LabeledSample], triggered_input: Optional[LabeledSample]) -> CircuitSpec:
    """Insert an RY layer after encoding, every angle initialized from the overlap
    of the encoded input and the encoded target exemplar."""
    if exemplar is None or triggered_input is None:
        raise ConfigError("QTrojan needs both a target exemplar and a triggered input")
    psi0 = amplitude_encode(triggered_input.features)
    psi1 = amplitude_encode(exemplar.features)
    theta = build_qtrojan_angle(psi0, psi1)
    return spec_model.with_trojan([theta] * spec_model.num_qubits)


def poison_count(plan: PoisonPlan, samples: Sequence[LabeledSample], mode: str) -> int:
    if mode == "train":
        return int(round(plan.rate * len(samples)))
    if mode == "test":
        return int(round(plan.rate * sum(1 for s in samples if s.true_label == plan.source_class)))
    raise ConfigError(f"mode must be 'train' or 'test', got {mode!r}")


def poison_dataset(train_set: Sequence[LabeledSample], plan: PoisonPlan, mode: str = "train") -> list[LabeledSample]:
    """Trigger and relabel a seed-chosen subset of source-class samples in place.

    In ``train`` mode round(rate * |D|) samples are poisoned; in ``test``
    mode round(rate * |source class|), so a 500/500 test set at 1% holds 495
    clean source, 5 backdoor and 500 target samples.  Order is preserved and
    untouched samples are returned as the same objects.
    """
    samples = list(train_set)
    n = poison_count(plan, samples, mode)
    if n == 0:
        return samples
    pool = [i for i, s in enumerate(samples) if s.true_label == plan.source_class and not s.is_poisoned]
    if n > len(pool):
        raise DomainError(f"{n} poisoned samples requested but only {len(pool)} source-class samples")
    chosen = np.random.default_rng(plan.seed).choice(pool, size=n, replace=False)
    for i in sorted(chosen.tolist()):
        s = samples[i]
        samples[i] = s.poisoned(apply_trigger(s.features, plan.trigger), plan.target_class)
    return samples


def to_pgm(features) -> bytes:
    """Binary PGM (P5) rendering of a 16x16 feature vector."""
    img = np.clip(np.round(_as_image(features) * 255.0), 0, 255).astype(np.uint8)
    return b"P5\n%d %d\n255\n" % (CROP_SIDE, CROP_SIDE) + img.tobytes()
