"""On-disk formats: the params file with its JSON sidecar, and hash-stamped JSON/CSV outputs."""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, FormatError, LengthError
from .model import CircuitSpec, ModelParams

PARAMS_FORMAT = "qsentry-params/1"
_COUNT = struct.Struct("<Q")


def encode_params(theta) -> bytes:
    """Little-endian u64 element count followed by that many little-endian float64 values."""
    arr = np.ascontiguousarray(theta, dtype="<f8").reshape(-1)
    return _COUNT.pack(arr.size) + arr.tobytes()


def decode_params(blob: bytes) -> np.ndarray:
    if len(blob) < _COUNT.size:
        raise LengthError(f"params file holds {len(blob)} bytes, shorter than its 8-byte count")
    (count,) = _COUNT.unpack_from(blob)
    payload = len(blob) - _COUNT.size
    if payload != 8 * count:
        raise LengthError(f"params file declares {count} values but carries {payload} payload bytes")
    return np.frombuffer(blob, dtype="<f8", offset=_COUNT.size).astype(np.float64)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_params(path, params: ModelParams, spec: CircuitSpec, config_hash: str, model_hash: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_params(params.theta))
    meta = {
        "format": PARAMS_FORMAT,
        "config_hash": config_hash,
        "model_hash": model_hash,
        "num_qubits": spec.num_qubits,
        "num_layers": spec.num_layers,
        "num_params": spec.num_params,
        "trojan_angles": None if spec.trojan_angles is None else list(spec.trojan_angles),
    }
    write_json(sidecar_path(path), meta)


def load_params(path, expected_spec: Optional[CircuitSpec] = None, expected_model_hash: Optional[str] = None):
    """Read a params file and its sidecar; returns (spec, params, sidecar dict).

    A sidecar whose circuit shape or model hash disagrees with the expected
    values is rejected with a ConfigError.
    """
    path = Path(path)
    theta = decode_params(path.read_bytes())
    try:
        meta = json.loads(sidecar_path(path).read_text())
    except FileNotFoundError:
        raise FormatError(f"params file {path} has no sidecar {sidecar_path(path).name}") from None
    if meta.get("format") != PARAMS_FORMAT:
        raise FormatError(f"unrecognized params sidecar format {meta.get('format')!r}")
    spec = CircuitSpec(meta["num_qubits"], meta["num_layers"], meta["trojan_angles"])
    if meta["num_params"] != theta.size or spec.num_params != theta.size:
        raise FormatError(f"sidecar describes {spec.num_params} parameters, file holds {theta.size}")
    if expected_spec is not None and (spec.num_qubits, spec.num_layers) != (expected_spec.num_qubits, expected_spec.num_layers):
        raise ConfigError(
            f"model is a {spec.num_qubits}-qubit, {spec.num_layers}-layer circuit; "
            f"config expects {expected_spec.num_qubits} qubits, {expected_spec.num_layers} layers"
        )
    if expected_model_hash is not None and meta["model_hash"] != expected_model_hash:
        raise ConfigError(f"model hash {meta['model_hash']} does not match config ({expected_model_hash})")
    return spec, ModelParams(theta), meta


def write_json(path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def csv_text(header: list, rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_training_log(path, history, config_hash: str) -> None:
    rows = [[config_hash, h.epoch, repr(h.loss), repr(h.clean_accuracy)] for h in history]
    Path(path).write_text(csv_text(["config_hash", "epoch", "loss", "clean_accuracy"], rows))
