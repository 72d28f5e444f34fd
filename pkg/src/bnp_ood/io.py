"""File formats: binary embeddings/labels, CSV embeddings, score tables and model JSON.

Binary embeddings (``.bnpe``)::

    b"BNPE" | u32 version=1 | u64 N | u64 D | N*D float64, row-major

Binary labels (``.bnpl``)::

    b"BNPL" | u32 version=1 | u64 N | N uint32

All integers and floats are little-endian.
"""

from __future__ import annotations

import csv
import io as _io
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .data import (
    DimensionMismatchError,
    EmbeddingDataset,
    FormatError,
    LabelRangeError,
    PayloadSizeError,
)

EMBED_MAGIC = b"BNPE"
LABEL_MAGIC = b"BNPL"
VERSION = 1
_EMBED_HEADER = struct.Struct("<4sIQQ")
_LABEL_HEADER = struct.Struct("<4sIQ")


def fmt_float(v: float) -> str:
    """17 significant digits, enough to round-trip any float64."""
    return format(float(v), ".17g")


def write_embeddings(path, X) -> None:
    X = np.ascontiguousarray(X, dtype="<f8")
    if X.ndim != 2:
        raise DimensionMismatchError("embeddings must be a 2-D array")
    N, D = X.shape
    with open(path, "wb") as fh:
        fh.write(_EMBED_HEADER.pack(EMBED_MAGIC, VERSION, N, D))
        fh.write(X.tobytes(order="C"))


def read_embeddings(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _EMBED_HEADER.size:
        raise FormatError(f"{path}: file too short for an embedding header")
    magic, version, N, D = _EMBED_HEADER.unpack_from(raw)
    if magic != EMBED_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {EMBED_MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    payload = raw[_EMBED_HEADER.size:]
    if len(payload) != 8 * N * D:
        raise PayloadSizeError(f"{path}: payload size mismatch, expected {8 * N * D} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").reshape(N, D).astype(np.float64)


def write_labels(path, y) -> None:
    y = np.asarray(y)
    if y.ndim != 1:
        raise DimensionMismatchError("labels must be 1-D")
    if y.size and y.min() < 0:
        raise LabelRangeError("labels must be non-negative")
    with open(path, "wb") as fh:
        fh.write(_LABEL_HEADER.pack(LABEL_MAGIC, VERSION, y.shape[0]))
        fh.write(y.astype("<u4").tobytes())


def read_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _LABEL_HEADER.size:
        raise FormatError(f"{path}: file too short for a label header")
    magic, version, N = _LABEL_HEADER.unpack_from(raw)
    if magic != LABEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {LABEL_MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    payload = raw[_LABEL_HEADER.size:]
    if len(payload) != 4 * N:
        raise PayloadSizeError(f"{path}: payload size mismatch, expected {4 * N} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<u4").astype(np.int64)


def write_csv_dataset(path, X, y=None) -> None:
    X = np.asarray(X, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = [f"d{j}" for j in range(X.shape[1])]
        if y is not None:
            header.append("label")
        w.writerow(header)
        for i, row in enumerate(X):
            cells = [fmt_float(v) for v in row]
            if y is not None:
                cells.append(str(int(y[i])))
            w.writerow(cells)


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def read_csv_dataset(path, has_labels: Optional[bool] = None):
    """Read ``D`` float columns optionally followed by an integer ``label`` column.

    The header row is optional. Without a header, ``has_labels`` decides whether
    the last column holds labels (default: no). Returns ``(X, y)`` with ``y``
    possibly None.
    """
    text = Path(path).read_text()
    rows = [r for r in csv.reader(_io.StringIO(text)) if r]
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    header = None
    if not all(_is_number(c) for c in rows[0]):
        header = [c.strip() for c in rows[0]]
        rows = rows[1:]
        if has_labels is None:
            has_labels = header[-1] == "label"
        elif has_labels and header[-1] != "label":
            raise FormatError(f"{path}: last header column must be 'label'")
        if "label" in header[:-1]:
            raise FormatError(f"{path}: 'label' must be the last column")
    width = len(header) if header is not None else len(rows[0]) if rows else 0
    for i, r in enumerate(rows):
        if len(r) != width:
            raise DimensionMismatchError(f"{path}: row {i} has {len(r)} columns, expected {width}")
    try:
        table = np.array([[float(c) for c in r] for r in rows], dtype=float).reshape(len(rows), width)
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric cell ({exc})") from None
    if has_labels:
        lab = table[:, -1]
        if np.any(lab != np.round(lab)) or np.any(lab < 0):
            raise LabelRangeError(f"{path}: labels must be non-negative integers")
        return table[:, :-1], lab.astype(np.int64)
    return table, None


def load_dataset(path_X, path_y=None, K: Optional[int] = None) -> EmbeddingDataset:
    """Load a labelled dataset from binary files or a labelled CSV.

    ``.csv`` inputs must carry a ``label`` column unless ``path_y`` is given.
    ``K`` defaults to ``max(label) + 1``; labels must be dense in ``[0, K)``.
    """
    path_X = Path(path_X)
    if path_X.suffix.lower() == ".csv":
        X, y = read_csv_dataset(path_X, has_labels=None if path_y is None else False)
    else:
        X, y = read_embeddings(path_X), None
    if path_y is not None:
        y = load_labels(path_y)
    if y is None:
        raise FormatError(f"{path_X}: no labels supplied")
    if y.shape[0] != X.shape[0]:
        raise DimensionMismatchError(f"{X.shape[0]} embeddings but {y.shape[0]} labels")
    ds = EmbeddingDataset.from_arrays(X, y, K)
    missing = np.flatnonzero(ds.counts() == 0)
    if missing.size:
        raise LabelRangeError(f"labels are not dense in [0, {ds.K}): classes {missing.tolist()} are empty")
    return ds


def _read_label_csv(path) -> np.ndarray:
    X, y = read_csv_dataset(path, has_labels=True)
    if X.shape[1] != 0:
        raise FormatError(f"{path}: label CSV must contain a single 'label' column")
    return y


def load_labels(path) -> np.ndarray:
    """Labels from a ``.bnpl`` file or a one-column ``label`` CSV."""
    return _read_label_csv(path) if Path(path).suffix.lower() == ".csv" else read_labels(path)


def load_matrix(path) -> np.ndarray:
    """Unlabelled embeddings (binary or CSV; a trailing ``label`` column is dropped)."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return read_csv_dataset(path)[0]
    return read_embeddings(path)


# ---------------------------------------------------------------- scores

def save_scores(table, path) -> None:
    """Write ``index,score[,predicted_class][,inlier_probability]``."""
    cols = ["index", "score"]
    if table.predicted_class is not None:
        cols.append("predicted_class")
    if table.inlier_probability is not None:
        cols.append("inlier_probability")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for i in range(len(table.score)):
            row = [str(i), fmt_float(table.score[i])]
            if table.predicted_class is not None:
                row.append(str(int(table.predicted_class[i])))
            if table.inlier_probability is not None:
                row.append(fmt_float(table.inlier_probability[i]))
            w.writerow(row)


def load_scores(path):
    from .scoring import ScoreTable

    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["index", "score"]:
        raise FormatError(f"{path}: score CSV must start with header 'index,score'")
    header = rows[0]
    body = rows[1:]
    for r in body:
        if len(r) != len(header):
            raise DimensionMismatchError(f"{path}: ragged score row {r}")
    try:
        cols = {name: [r[j] for r in body] for j, name in enumerate(header)}
        idx = np.array([int(v) for v in cols["index"]], dtype=np.int64)
        score = np.array([float(v) for v in cols["score"]])
        pred = np.array([int(v) for v in cols["predicted_class"]]) if "predicted_class" in cols else None
        prob = np.array([float(v) for v in cols["inlier_probability"]]) if "inlier_probability" in cols else None
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if not np.array_equal(idx, np.arange(len(idx))):
        raise FormatError(f"{path}: index column must be 0..n-1 in order")
    return ScoreTable(score, prob, pred)


# ---------------------------------------------------------------- models

def _encode(obj):
    if isinstance(obj, np.ndarray):
        return {"shape": list(obj.shape), "data": obj.ravel(order="C").tolist()}
    if isinstance(obj, dict):
        return {k: _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _decode(obj):
    if isinstance(obj, dict):
        if set(obj) == {"shape", "data"}:
            return np.array(obj["data"], dtype=float).reshape(obj["shape"])
        return {k: _decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v) for v in obj]
    return obj


def dumps_model(model) -> str:
    """JSON text for a fitted model; floats use shortest round-trip repr."""
    doc = _encode(model.to_dict())
    return json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n"


def save_model(model, path) -> None:
    Path(path).write_text(dumps_model(model))


def loads_model(text: str):
    from .models import model_from_dict

    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"model file is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or "variant" not in doc:
        raise FormatError("model JSON lacks a 'variant' field")
    return model_from_dict(_decode(doc))


def load_model(path):
    return loads_model(Path(path).read_text())


def save_whitener(w, path) -> None:
    doc = {"whitener": _encode(w.to_dict())}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n")


def load_whitener(path):
    from .preprocess import Whitener

    try:
        doc = _decode(json.loads(Path(path).read_text()))
        return Whitener.from_dict(doc["whitener"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: not a whitener file ({exc})") from None
