"""Versioned plain-text artifact formats: datasets, bases, checkpoints, CSV tables."""
from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .errors import (
    BasisCorruptError,
    CheckpointCorruptError,
    DatasetCorruptError,
    DatasetCountError,
    FormatVersionError,
)
from .manifold import SpectralBasis
from .model import FlowModel, ModelConfig, param_shapes
from .synth import DatasetSplit, GeneratorConfig, SceneContext, Scenario, config_dict
from .training import FORMAT_CKPT, Checkpoint

FORMAT_DS = "specflow-ds-v1"
FORMAT_PCA = "specflow-pca-v1"
FORMAT_CSV_PREFIX = "# "


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def _line(values) -> str:
    return " ".join(fmt(v) for v in np.ravel(values))


def _floats(text: str, n: int | None = None, err=ValueError) -> np.ndarray:
    try:
        arr = np.array([float(tok) for tok in text.split()], dtype=np.float64)
    except ValueError as exc:
        raise err(f"unparseable number: {exc}") from None
    if n is not None and arr.size != n:
        raise err(f"expected {n} values, found {arr.size}")
    return arr


def _dump_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ----------------------------------------------------------------------------
# datasets (one JSON record per line)


def _scenario_record(split: str, s: Scenario) -> dict[str, Any]:
    return {
        "split": split,
        "seed": int(s.seed),
        "anomaly_tag": s.anomaly_tag,
        "history": s.context.history.tolist(),
        "goal_lane": s.context.goal_lane.tolist(),
        "future": s.future.tolist(),
        "meta": s.meta,
    }


def dataset_text(ds: DatasetSplit) -> str:
    header = {
        "format": FORMAT_DS,
        "n_train": len(ds.train),
        "n_val": len(ds.val),
        "seed": ds.seed,
        "generator_config": config_dict(ds.generator_config),
    }
    out = io.StringIO()
    out.write(_dump_json(header) + "\n")
    for split, items in (("train", ds.train), ("val", ds.val)):
        for s in items:
            out.write(_dump_json(_scenario_record(split, s)) + "\n")
    return out.getvalue()


def write_dataset(ds: DatasetSplit, path) -> None:
    Path(path).write_text(dataset_text(ds), encoding="utf-8")


def _scenario_from_record(rec: dict[str, Any]) -> Scenario:
    try:
        history = np.array(rec["history"], dtype=np.float64)
        goal = np.array(rec["goal_lane"], dtype=np.float64)
        future = np.array(rec["future"], dtype=np.float64)
        if history.shape != (11, 5) or goal.shape != (20, 2) or future.shape != (80, 2):
            raise ValueError("array shapes")
        return Scenario(
            context=SceneContext(history=history, goal_lane=goal),
            future=future,
            anomaly_tag=str(rec["anomaly_tag"]),
            seed=int(rec["seed"]),
            meta=dict(rec.get("meta", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetCorruptError(f"bad scenario record: {exc}") from None


def read_dataset_header(path) -> dict[str, Any]:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    try:
        header = json.loads(first)
    except json.JSONDecodeError:
        raise DatasetCorruptError("dataset header is not valid JSON") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_DS:
        raise FormatVersionError(f"unsupported dataset format {header.get('format') if isinstance(header, dict) else None!r}")
    return header


def read_dataset(path) -> DatasetSplit:
    header = read_dataset_header(path)
    train, val = [], []
    with open(path, encoding="utf-8") as fh:
        fh.readline()
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                raise DatasetCorruptError(f"line {lineno} is not valid JSON") from None
            (train if rec.get("split") == "train" else val).append(_scenario_from_record(rec))
    if len(train) != header.get("n_train") or len(val) != header.get("n_val"):
        raise DatasetCountError(
            f"header declares {header.get('n_train')}/{header.get('n_val')} train/val records, found {len(train)}/{len(val)}"
        )
    return DatasetSplit(
        train=train,
        val=val,
        generator_config=GeneratorConfig.from_dict(header["generator_config"]),
        seed=int(header["seed"]),
    )


# ----------------------------------------------------------------------------
# spectral basis


def basis_text(b: SpectralBasis) -> str:
    lines = [
        FORMAT_PCA,
        f"k {b.k}",
        f"D {b.dim}",
        "mean " + _line(b.mean),
        "scales " + _line(b.scales),
        "explained_variance_ratio " + _line(b.explained_variance_ratio),
    ]
    lines += ["basis " + _line(row) for row in b.basis]
    lines.append(f"sha256 {b.digest()}")
    return "\n".join(lines) + "\n"


def write_basis(b: SpectralBasis, path) -> None:
    Path(path).write_text(basis_text(b), encoding="utf-8")


def read_basis(path) -> SpectralBasis:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != FORMAT_PCA:
        raise FormatVersionError(f"unsupported basis format {lines[0] if lines else ''!r}")
    try:
        fields: dict[str, list[str]] = {}
        for line in lines[1:]:
            key, _, rest = line.partition(" ")
            fields.setdefault(key, []).append(rest)
        k = int(fields["k"][0])
        d = int(fields["D"][0])
        b = SpectralBasis(
            mean=_floats(fields["mean"][0], d, BasisCorruptError),
            basis=np.array([_floats(r, d, BasisCorruptError) for r in fields["basis"]]).reshape(k, d),
            scales=_floats(fields["scales"][0], k, BasisCorruptError),
            explained_variance_ratio=_floats(fields["explained_variance_ratio"][0], k, BasisCorruptError),
        )
        digest = fields["sha256"][0].strip()
    except (KeyError, IndexError, ValueError) as exc:
        if isinstance(exc, BasisCorruptError):
            raise
        raise BasisCorruptError(f"incomplete basis file: {exc}") from None
    if b.digest() != digest:
        raise BasisCorruptError("basis content does not match its recorded hash")
    return b


# ----------------------------------------------------------------------------
# checkpoints


def checkpoint_text(ck: Checkpoint) -> str:
    lines = [
        ck.format_version,
        f"basis_hash {ck.basis_hash}",
        f"epoch {ck.epoch}",
        "model_config " + _dump_json(ck.model.config_dict()),
        "train_config " + _dump_json(ck.config),
    ]
    for name in sorted(ck.model.params):
        arr = ck.model.params[name]
        lines.append(f"param {name} " + ",".join(str(s) for s in arr.shape))
        lines.append(_line(arr))
    for name in sorted(ck.model.buffers):
        arr = ck.model.buffers[name]
        lines.append(f"buffer {name} " + ",".join(str(s) for s in arr.shape))
        lines.append(_line(arr))
    body = "\n".join(lines) + "\n"
    return body + f"end {hashlib.sha256(body.encode()).hexdigest()}\n"


def write_checkpoint(ck: Checkpoint, path) -> None:
    Path(path).write_text(checkpoint_text(ck), encoding="utf-8")


def read_checkpoint(path) -> Checkpoint:
    text = Path(path).read_text(encoding="utf-8")
    first = text.split("\n", 1)[0]
    if first != FORMAT_CKPT:
        if first.startswith("specflow-ckpt-"):
            raise FormatVersionError(f"unsupported checkpoint format {first!r}")
        raise CheckpointCorruptError("missing checkpoint header")
    body, sep, tail = text.rpartition("end ")
    if not sep or not tail.endswith("\n") or hashlib.sha256(body.encode()).hexdigest() != tail.strip():
        raise CheckpointCorruptError("checkpoint is truncated or its checksum does not match")
    lines = body.splitlines()
    try:
        basis_hash = lines[1].split(" ", 1)[1]
        epoch = int(lines[2].split(" ", 1)[1])
        mcfg = ModelConfig(**json.loads(lines[3].split(" ", 1)[1]))
        tcfg = json.loads(lines[4].split(" ", 1)[1])
        arrays: dict[str, dict[str, np.ndarray]] = {"param": {}, "buffer": {}}
        for i in range(5, len(lines), 2):
            kind, name, shape_txt = lines[i].split(" ")
            shape = tuple(int(s) for s in shape_txt.split(",") if s)
            arrays[kind][name] = _floats(lines[i + 1], int(np.prod(shape)), CheckpointCorruptError).reshape(shape)
        if set(arrays["param"]) != set(param_shapes(mcfg)):
            raise ValueError("parameter set does not match model config")
        model = FlowModel(mcfg, arrays["param"], arrays["buffer"])
    except (IndexError, KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
        if isinstance(exc, CheckpointCorruptError):
            raise
        raise CheckpointCorruptError(f"malformed checkpoint: {exc}") from None
    return Checkpoint(model=model, basis_hash=basis_hash, config=tcfg, epoch=epoch)


# ----------------------------------------------------------------------------
# CSV tables with a leading version comment


def csv_text(version: str, header: list[str], rows: Iterable[Iterable[Any]]) -> str:
    out = io.StringIO()
    out.write(FORMAT_CSV_PREFIX + version + "\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return out.getvalue()


def write_csv(path, version: str, header: list[str], rows) -> None:
    Path(path).write_text(csv_text(version, header, rows), encoding="utf-8")


def read_csv(path, version: str) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        first = fh.readline().rstrip("\n")
        if first != FORMAT_CSV_PREFIX + version:
            raise FormatVersionError(f"expected {version!r}, found {first!r}")
        return list(csv.DictReader(fh))
