"""One experiment cell end to end: data, (poisoned) training, attack scores, detection."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import attacks, data, model
from .attacks import PoisonPlan, TriggerSpec
from .detector import DetectionReport, DetectorOptions, MeasurementMatrix, collect_measurements, detect, detect_raw_baseline
from .errors import ConfigError
from .metrics import attack_success_rate, clean_accuracy
from .model import CircuitSpec, ModelParams, TrainConfig

log = logging.getLogger(__name__)

SEED_STREAMS = ("data", "init", "attack", "detector")
MNIST_ENV = "QSENTRY_MNIST_DIR"


@dataclass(frozen=True)
class ExperimentConfig:
    data_dir: str = "data/mnist"
    source_digit: int = 1
    target_digit: int = 7
    crop: str = "center"
    n_train: int = 2000
    n_test_per_class: int = 500
    n_validation: int = 200
    num_qubits: int = 8
    num_layers: int = 8
    train: dict = field(default_factory=dict)
    attack: Optional[str] = None
    attack_params: dict = field(default_factory=dict)
    poison_rate: float = 0.0
    detector: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=lambda: {s: 0 for s in SEED_STREAMS})
    out_dir: str = "runs"
    rates: tuple = (0.01, 0.05, 0.10)
    attacks: tuple = attacks.ATTACKS
    repeats: int = 3

    def __post_init__(self):
        if self.attack is not None and self.attack not in attacks.ATTACKS:
            raise ConfigError(f"unknown attack {self.attack!r}")
        if not 0.0 <= self.poison_rate < 1.0:
            raise ConfigError(f"poison_rate must be in [0, 1), got {self.poison_rate}")
        if self.attack is None and self.poison_rate:
            raise ConfigError("poison_rate set without an attack")
        missing = [s for s in SEED_STREAMS if s not in self.seeds]
        if missing:
            raise ConfigError(f"seeds must be explicit; missing streams {missing}")
        for s, v in self.seeds.items():
            if s not in SEED_STREAMS:
                raise ConfigError(f"unknown seed stream {s!r}")
            if not isinstance(v, int) or v < 0:
                raise ConfigError(f"seed {s} must be a non-negative integer, got {v!r}")
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        object.__setattr__(self, "attacks", tuple(self.attacks))
        # validate nested sections eagerly
        self.train_config()
        self.detector_options()

    # -- derived objects

    @property
    def digits(self) -> tuple:
        return (self.source_digit, self.target_digit)

    def circuit_spec(self) -> CircuitSpec:
        return CircuitSpec(self.num_qubits, self.num_layers)

    def train_config(self) -> TrainConfig:
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(self.train) - known
        if unknown:
            raise ConfigError(f"unknown train keys {sorted(unknown)}")
        return TrainConfig(**{**self.train, "seed": self.seeds["init"]})

    def detector_options(self) -> DetectorOptions:
        known = {f.name for f in fields(DetectorOptions)}
        unknown = set(self.detector) - known
        if unknown:
            raise ConfigError(f"unknown detector keys {sorted(unknown)}")
        opts = dict(self.detector)
        if "k_candidates" in opts:
            opts["k_candidates"] = tuple(opts["k_candidates"])
        return DetectorOptions(**{**opts, "seed": self.seeds["detector"]})

    def trigger_spec(self) -> Optional[TriggerSpec]:
        if self.attack is None:
            return None
        params = dict(self.attack_params)
        if "location" in params:
            params["location"] = tuple(params["location"])
        return TriggerSpec(self.attack, target_class=1, **params)

    # -- variants

    def cell(self, attack: Optional[str], rate: float) -> "ExperimentConfig":
        return replace(self, attack=attack, poison_rate=rate if attack else 0.0)

    def repeat(self, r: int) -> "ExperimentConfig":
        """Repeat ``r`` shifts every seed stream by ``r``; repeat 0 is the config itself."""
        return replace(self, seeds={s: v + r for s, v in self.seeds.items()})

    def with_seed(self, stream: str, value: int) -> "ExperimentConfig":
        if stream not in SEED_STREAMS:
            raise ConfigError(f"unknown seed stream {stream!r}")
        return replace(self, seeds={**self.seeds, stream: int(value)})

    # -- persistence

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rates"] = list(self.rates)
        d["attacks"] = list(self.attacks)
        return d

    def hash(self) -> str:
        """Digest of everything that determines a cell's model and detection results."""
        d = self.to_dict()
        for k in ("data_dir", "out_dir", "rates", "attacks", "repeats"):
            d.pop(k)
        return _digest(d)

    def model_hash(self) -> str:
        """Digest of the settings that determine the trained parameters only."""
        d = self.to_dict()
        for k in ("data_dir", "out_dir", "rates", "attacks", "repeats", "detector"):
            d.pop(k)
        d["seeds"] = {s: v for s, v in d["seeds"].items() if s != "detector"}
        return _digest(d)

    @classmethod
    def from_dict(cls, d: dict, base_dir: Optional[Path] = None) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        d = dict(d)
        if "task" in d:
            raise ConfigError("use source_digit/target_digit instead of task")
        for key in ("rates", "attacks"):
            if key in d:
                d[key] = tuple(d[key])
        cfg = cls(**d)
        if base_dir is not None:
            # relative paths in a config file are relative to that file
            for key in ("data_dir", "out_dir"):
                value = getattr(cfg, key)
                if not Path(value).is_absolute():
                    cfg = replace(cfg, **{key: str((Path(base_dir) / value).resolve())})
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        """Read a JSON config; ``$QSENTRY_MNIST_DIR`` overrides its data_dir."""
        path = Path(path)
        cfg = cls.from_dict(json.loads(path.read_text()), path.parent)
        if os.environ.get(MNIST_ENV):
            cfg = replace(cfg, data_dir=os.environ[MNIST_ENV])
        cfg.check_files()
        return cfg

    def check_files(self) -> None:
        for split in ("train", "test"):
            for name in data.MNIST_FILES[split]:
                p = Path(self.data_dir) / name
                if not p.exists() and not p.with_name(name + ".gz").exists():
                    raise ConfigError(f"missing MNIST file {p}")


def _digest(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    train: list
    test: list
    validation: list


_DATA_CACHE: dict = {}


def _pools(cfg: ExperimentConfig):
    key = (str(cfg.data_dir), cfg.digits, cfg.crop)
    if key not in _DATA_CACHE:
        train_pool = data.load_binary_task(cfg.data_dir, "train", cfg.digits, cfg.crop)
        test_pool = data.load_binary_task(cfg.data_dir, "test", cfg.digits, cfg.crop)
        _DATA_CACHE[key] = (train_pool, test_pool)
    return _DATA_CACHE[key]


def prepare_data(cfg: ExperimentConfig) -> Dataset:
    """Balanced subsets: train from the MNIST train split, test and validation from the test split."""
    train_pool, test_pool = _pools(cfg)
    seed = cfg.seeds["data"]
    half = cfg.n_train // 2
    train = data.subsample_balanced(train_pool, {0: half, 1: cfg.n_train - half}, seed)
    n = cfg.n_test_per_class
    test = data.subsample_balanced(test_pool, {0: n, 1: n}, seed + 1)
    used = {s.source_index for s in test}
    rest = [s for s in test_pool if s.source_index not in used]
    vhalf = cfg.n_validation // 2
    validation = data.subsample_balanced(rest, {0: vhalf, 1: cfg.n_validation - vhalf}, seed + 2) if cfg.n_validation else []
    return Dataset(train, test, validation)


@dataclass
class TrainedModel:
    spec: CircuitSpec
    params: ModelParams
    history: list
    trigger: Optional[TriggerSpec]


def resolve_trigger(cfg: ExperimentConfig, dataset: Dataset) -> Optional[TriggerSpec]:
    """The configured trigger with any seed-chosen blend pattern attached."""
    trigger = cfg.trigger_spec()
    if trigger is not None and trigger.kind == "blend":
        trigger = attacks.with_blend_pattern(trigger, dataset.train, cfg.seeds["attack"])
    return trigger


def initial_spec(cfg: ExperimentConfig, dataset: Dataset) -> CircuitSpec:
    """Circuit before training; for QTrojan the RY layer starts at the overlap angle
    between a source-class input and a target-class exemplar."""
    spec = cfg.circuit_spec()
    if cfg.attack == "qtrojan":
        seed = cfg.seeds["attack"]
        exemplar = attacks.choose_exemplar(dataset.train, 1, seed)
        source = attacks.choose_exemplar(dataset.train, 0, seed + 1)
        spec = attacks.build_qtrojan(spec, exemplar, source)
    return spec


def poisoned_train_set(cfg: ExperimentConfig, dataset: Dataset, trigger: Optional[TriggerSpec]) -> list:
    if trigger is None or cfg.poison_rate == 0:
        return list(dataset.train)
    plan = PoisonPlan(cfg.poison_rate, trigger, 0, trigger.target_class, cfg.seeds["attack"])
    return attacks.poison_dataset(dataset.train, plan, "train")


def train_model(cfg: ExperimentConfig, dataset: Dataset, callback=None) -> TrainedModel:
    trigger = resolve_trigger(cfg, dataset)
    train_set = poisoned_train_set(cfg, dataset, trigger)
    result = model.train(initial_spec(cfg, dataset), train_set, cfg.train_config(),
                         validation=dataset.validation, callback=callback)
    return TrainedModel(result.spec, result.params, result.history, trigger)


def detection_test_set(cfg: ExperimentConfig, dataset: Dataset, trigger: Optional[TriggerSpec]) -> list:
    if trigger is None or cfg.poison_rate == 0:
        return list(dataset.test)
    plan = PoisonPlan(cfg.poison_rate, trigger, 0, trigger.target_class, cfg.seeds["attack"] + 7)
    return attacks.poison_dataset(dataset.test, plan, "test")


def attack_scores(cfg: ExperimentConfig, dataset: Dataset, trained: TrainedModel) -> dict:
    """Clean accuracy on the clean test set and ASR on every triggered source-class test sample."""
    feats = data.features_matrix(dataset.test)
    labels = np.array([s.true_label for s in dataset.test])
    preds = model.predict(trained.spec, trained.params, feats, trojan=False)
    out = {"ca": clean_accuracy(preds, labels)}
    trigger = trained.trigger
    if trigger is not None:
        source = [s for s in dataset.test if s.true_label == 0]
        if trigger.kind == "qtrojan":
            tp = model.predict(trained.spec, trained.params, data.features_matrix(source), trojan=True)
        else:
            triggered = np.stack([attacks.apply_trigger(s.features, trigger) for s in source])
            tp = model.predict(trained.spec, trained.params, triggered, trojan=False)
        out["asr"] = attack_success_rate(tp, trigger.target_class)
    return out


def cluster_composition(report: DetectionReport, test: list) -> dict:
    """Actual and predicted source/target/backdoor counts.

    The minority cluster is the predicted backdoor group; every other cluster
    is named after the majority true class of its members.
    """
    truth = np.array([s.is_poisoned for s in test])
    labels = np.array([s.true_label for s in test])
    act = {
        "source": int(np.sum((labels == 0) & ~truth)),
        "target": int(np.sum((labels == 1) & ~truth)),
        "backdoor": int(truth.sum()),
    }
    assign = np.asarray(report.assignments)
    pred = {"source": 0, "target": 0, "backdoor": 0}
    for k, size in enumerate(report.cluster_sizes):
        if k == report.minority_cluster:
            pred["backdoor"] += size
            continue
        members = labels[assign == k]
        name = "target" if np.sum(members == 1) > np.sum(members == 0) else "source"
        pred[name] += size
    return {"act": act, "pred": pred}


@dataclass
class CellResult:
    config_hash: str
    attack: Optional[str]
    rate: float
    ca: float
    asr: Optional[float]
    qsentry: DetectionReport
    raw: DetectionReport
    actual_backdoor: int
    composition: dict
    matrix: MeasurementMatrix = field(repr=False)
    trained: TrainedModel = field(repr=False)

    def metrics(self) -> dict:
        q, r = self.qsentry, self.raw
        return {
            "config_hash": self.config_hash,
            "attack": self.attack,
            "rate": self.rate,
            "ca": self.ca,
            "asr": self.asr,
            "actual_backdoor": self.actual_backdoor,
            "composition": self.composition,
            "qsentry": {"da": q.da, "f1": q.f1, "sc": q.sc, "rcs": q.rcs, "k": q.k, "flagged": len(q.flagged_indices),
                        "inconclusive": q.inconclusive, "flagged_silhouette": q.flagged_silhouette,
                        "clean_silhouettes": q.clean_silhouettes},
            "raw": {"da": r.da, "f1": r.f1, "sc": r.sc, "rcs": r.rcs, "k": r.k, "flagged": len(r.flagged_indices),
                    "inconclusive": r.inconclusive},
        }


def run_cell(cfg: ExperimentConfig, trained: Optional[TrainedModel] = None) -> CellResult:
    dataset = prepare_data(cfg)
    if trained is None:
        trained = train_model(cfg, dataset)
    scores = attack_scores(cfg, dataset, trained)
    test = detection_test_set(cfg, dataset, trained.trigger)
    matrix = collect_measurements(trained.spec, trained.params, test)
    opts = cfg.detector_options()
    q = detect(trained.spec, trained.params, test, opts, matrix=matrix)
    r = detect_raw_baseline(test, opts)
    n_bd = sum(s.is_poisoned for s in test)
    return CellResult(cfg.hash(), cfg.attack, cfg.poison_rate, scores["ca"], scores.get("asr"), q, r, n_bd,
                      cluster_composition(q, test), matrix, trained)
