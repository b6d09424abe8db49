"""Measurement clustering: flag the minority cluster of a model's measurement statistics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import clustering
from .clustering import ClusterResult, FeatureMatrix
from .errors import ConfigError, ShapeError
from .metrics import Confusion, confusion, detection_accuracy, f1
from .model import CircuitSpec, ModelParams, measure

INCONCLUSIVE_SC = 0.2


@dataclass(frozen=True)
class DetectorOptions:
    transform: str = "ica"
    d: int = 2
    k_candidates: tuple = (2, 3)
    restarts: int = 10
    max_iter: int = 300
    seed: int = 0
    component_selection: str = "negentropy"
    inconclusive_threshold: float = INCONCLUSIVE_SC

    def __post_init__(self):
        if self.transform not in clustering.TRANSFORMS:
            raise ConfigError(f"unknown transform {self.transform!r}")
        if self.d < 1:
            raise ConfigError(f"d must be >= 1, got {self.d}")
        if not self.k_candidates or min(self.k_candidates) < 2:
            raise ConfigError(f"K candidates must all be >= 2, got {self.k_candidates}")
        object.__setattr__(self, "k_candidates", tuple(int(k) for k in self.k_candidates))


@dataclass
class MeasurementMatrix:
    values: np.ndarray
    sample_ids: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        if self.values.ndim != 2 or self.values.shape[0] != self.sample_ids.shape[0]:
            raise ShapeError(f"{self.values.shape} values for {self.sample_ids.shape[0]} sample ids")

    def to_csv(self, config_hash: Optional[str] = None) -> str:
        """CSV with header ``sample_id,z0..``; an optional leading ``# config_hash=`` comment."""
        buf = io.StringIO()
        if config_hash is not None:
            buf.write(f"# config_hash={config_hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id"] + [f"z{q}" for q in range(self.values.shape[1])])
        for sid, row in zip(self.sample_ids, self.values):
            w.writerow([int(sid)] + [repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MeasurementMatrix":
        lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
        rows = list(csv.reader(lines))
        if not rows:
            raise ShapeError("empty measurement CSV")
        header, body = rows[0], rows[1:]
        if header[0] != "sample_id" or header[1:] != [f"z{q}" for q in range(len(header) - 1)]:
            raise ShapeError(f"unexpected measurement CSV header {header}")
        ids = [int(r[0]) for r in body]
        values = np.array([[float(v) for v in r[1:]] for r in body]).reshape(len(body), len(header) - 1)
        return cls(values, np.array(ids, dtype=np.int64))


@dataclass
class DetectionReport:
    pipeline: str
    k: int
    candidate_scores: dict
    cluster_sizes: list
    cluster_silhouettes: list
    minority_cluster: int
    flagged_indices: list
    sc: float
    rcs: float
    inconclusive: bool
    assignments: list = field(repr=False)
    sample_scores: list = field(repr=False)
    confusion: Optional[dict] = None
    da: Optional[float] = None
    f1: Optional[float] = None
    n_poisoned: Optional[int] = None

    @property
    def flagged_silhouette(self) -> float:
        return self.cluster_silhouettes[self.minority_cluster]

    @property
    def clean_silhouettes(self) -> list:
        return [s for k, s in enumerate(self.cluster_silhouettes) if k != self.minority_cluster]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["candidate_scores"] = {str(k): v for k, v in self.candidate_scores.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionReport":
        d = dict(d)
        d["candidate_scores"] = {int(k): v for k, v in d["candidate_scores"].items()}
        return cls(**d)

    def summary(self) -> str:
        f1_text = "absent" if self.f1 is None else f"{self.f1:.4f}"
        da_text = "absent" if self.da is None else f"{self.da:.4f}"
        flag = " INCONCLUSIVE" if self.inconclusive else ""
        return (
            f"{self.pipeline}: K={self.k} flagged={len(self.flagged_indices)} "
            f"SC={self.sc:.4f} RCS={self.rcs:.4f} DA={da_text} F1={f1_text}{flag}"
        )


def collect_measurements(spec: CircuitSpec, params: ModelParams, samples: Sequence, trojan=None) -> MeasurementMatrix:
    """Row i holds <Z_0>..<Z_{Q-1}> for sample i.

    With a trojan layer in the spec, the layer fires on the samples that
    carry the attacker's activation (``is_poisoned``) unless ``trojan``
    gives an explicit mask.
    """
    feats = np.stack([s.features for s in samples])
    if trojan is None:
        trojan = np.array([s.is_poisoned for s in samples]) if spec.has_trojan else False
    values = measure(spec, params, feats, trojan)
    return MeasurementMatrix(values, np.arange(len(samples)))


def _run_pipeline(matrix: np.ndarray, options: DetectorOptions, truth: Optional[np.ndarray], pipeline: str):
    features = clustering.transform_features(
        matrix, options.transform, options.d, options.seed, options.component_selection
    )
    k, scores, results = clustering.select_k(
        features.values, options.k_candidates, options.seed, options.restarts, options.max_iter
    )
    result = results[k]
    minority = clustering.identify_minority(result)
    sample_scores, sc = clustering.silhouette(features.values, result.assignments)
    flagged = np.flatnonzero(result.assignments == minority)
    report = DetectionReport(
        pipeline=pipeline,
        k=k,
        candidate_scores={int(c): float(s) for c, s in scores.items()},
        cluster_sizes=[int(v) for v in result.sizes],
        cluster_silhouettes=clustering.cluster_silhouettes(sample_scores, result.assignments, k),
        minority_cluster=minority,
        flagged_indices=[int(i) for i in flagged],
        sc=sc,
        rcs=clustering.relative_cluster_size(result),
        inconclusive=all(s < options.inconclusive_threshold for s in scores.values()),
        assignments=[int(a) for a in result.assignments],
        sample_scores=[float(v) for v in sample_scores],
    )
    if truth is not None:
        c = confusion(flagged, np.flatnonzero(truth), len(truth))
        report.confusion = c.as_dict()
        report.da = detection_accuracy(c)
        # with no true poisons F1 is undefined, even if something was flagged
        report.f1 = f1(c) if truth.any() else None
        report.n_poisoned = int(truth.sum())
    return report, features, result


def _truth(samples: Sequence) -> Optional[np.ndarray]:
    flags = [getattr(s, "is_poisoned", None) for s in samples]
    if any(f is None for f in flags):
        return None
    return np.array(flags, dtype=bool)


def detect(spec: CircuitSpec, params: ModelParams, test_samples: Sequence, options: DetectorOptions = DetectorOptions(), matrix: Optional[MeasurementMatrix] = None) -> DetectionReport:
    """Measurements -> feature transform -> K selection -> k-means -> minority cluster."""
    if matrix is None:
        matrix = collect_measurements(spec, params, test_samples)
    report, _, _ = _run_pipeline(matrix.values, options, _truth(test_samples), "qsentry")
    return report


def detect_raw_baseline(test_samples: Sequence, options: DetectorOptions = DetectorOptions()) -> DetectionReport:
    """The same pipeline applied to raw 256-pixel features instead of measurements."""
    feats = np.stack([s.features for s in test_samples])
    report, _, _ = _run_pipeline(feats, options, _truth(test_samples), "raw")
    return report
