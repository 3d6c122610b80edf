"""Readers and writers for every on-disk format.

CSV files are UTF-8, comma separated, with a mandatory header; LF and CRLF
line endings are both accepted.  Floats are written with ``repr`` so text
round-trips are exact.  All writers go through a temp file + rename.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import FormatError, LengthError, ParseError, ValidationError
from .gcn import ModelParams
from .graph import PatientGraph
from .records import FeatureMatrix, Patch, PatientRecord

LABELS_HEADER = ["patient_id", "os_event", "os_time_months"]
MANIFEST_HEADER = ["patient_id", "wsi_id"]
PATCHES_HEADER = ["wsi_id", "patch_id", "grid_row", "grid_col", "tissue_fraction"]
INDEX_HEADER = ["wsi_id", "patch_id"]
EDGES_HEADER = ["u", "v"]
RISKS_HEADER = ["patient_id", "risk"]
ROC_HEADER = ["threshold", "fpr", "tpr"]

GFX_MAGIC = b"GFX1"
GFX_HEADER = struct.Struct("<4sIII")
MODEL_FORMAT_VERSION = 1


# -- low level -----------------------------------------------------------

def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _fmt(x: float) -> str:
    return repr(float(x))


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _read_csv(path, header: Sequence[str], prefix_only=False) -> Iterator[Tuple[int, List[str]]]:
    """Yield ``(line_number, fields)`` for each data row after checking the header."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, header required", 1) from None
        got = [h.strip() for h in first]
        if got and got[0].startswith("﻿"):
            got[0] = got[0][1:]
        ok = got[:len(header)] == list(header) if prefix_only else got == list(header)
        if not ok:
            raise ParseError(f"{path}: expected header {','.join(header)!r}, got {','.join(got)!r}", 1)
        for row in reader:
            line = reader.line_num
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(got):
                raise ParseError(f"{path}: expected {len(got)} fields, got {len(row)}", line)
            yield line, [f.strip() for f in row]


def _int(s: str, what: str, path, line: int) -> int:
    try:
        return int(s)
    except ValueError:
        raise ParseError(f"{path}: {what} is not an integer: {s!r}", line) from None


def _float(s: str, what: str, path, line: int) -> float:
    try:
        return float(s)
    except ValueError:
        raise ParseError(f"{path}: {what} is not a number: {s!r}", line) from None


# -- labels / manifest ---------------------------------------------------

def read_manifest(path) -> "OrderedDict[str, List[str]]":
    """patient_id -> slide ids, in file order."""
    out: "OrderedDict[str, List[str]]" = OrderedDict()
    seen = set()
    for line, (pid, wsi) in _read_csv(path, MANIFEST_HEADER):
        if not pid or not wsi:
            raise ParseError(f"{path}: empty patient_id or wsi_id", line)
        if wsi in seen:
            raise ValidationError(f"{path}: line {line}: slide {wsi!r} assigned twice")
        seen.add(wsi)
        out.setdefault(pid, []).append(wsi)
    return out


def read_labels(path, manifest=None) -> List[PatientRecord]:
    """Read ``labels.csv``; slide ids come from ``manifest`` (path or mapping)."""
    if manifest is not None and not isinstance(manifest, dict):
        manifest = read_manifest(manifest)
    records, seen = [], set()
    for line, (pid, ev, t) in _read_csv(path, LABELS_HEADER):
        if not pid:
            raise ParseError(f"{path}: empty patient_id", line)
        event = _int(ev, "os_event", path, line)
        time = _float(t, "os_time_months", path, line)
        if pid in seen:
            raise ValidationError(f"{path}: line {line}: duplicate patient_id {pid!r}")
        seen.add(pid)
        wsi = tuple(manifest.get(pid, ())) if manifest is not None else ()
        try:
            records.append(PatientRecord(pid, event, time, wsi))
        except ValidationError as exc:
            raise ValidationError(f"{path}: line {line}: {exc}") from None
    return records


def write_labels(records: Sequence[PatientRecord], path) -> None:
    atomic_write_text(path, _csv_text(
        LABELS_HEADER, [(r.patient_id, r.os_event, _fmt(r.os_time_months)) for r in records]))


def write_manifest(records: Sequence[PatientRecord], path) -> None:
    atomic_write_text(path, _csv_text(
        MANIFEST_HEADER, [(r.patient_id, w) for r in records for w in r.wsi_ids]))


# -- patches -------------------------------------------------------------

def read_patches(path) -> List[Patch]:
    patches, keys, cells = [], set(), set()
    for line, (wsi, pid, r, c, frac) in _read_csv(path, PATCHES_HEADER):
        p_id = _int(pid, "patch_id", path, line)
        row = _int(r, "grid_row", path, line)
        col = _int(c, "grid_col", path, line)
        f = _float(frac, "tissue_fraction", path, line)
        try:
            p = Patch(wsi, p_id, row, col, f)
        except ValidationError as exc:
            raise ValidationError(f"{path}: line {line}: {exc}") from None
        if p.key in keys:
            raise ValidationError(f"{path}: line {line}: duplicate patch {p.key}")
        if (wsi, row, col) in cells:
            raise ValidationError(f"{path}: line {line}: grid cell ({row}, {col}) of {wsi!r} used twice")
        keys.add(p.key)
        cells.add((wsi, row, col))
        patches.append(p)
    return patches


def write_patches(patches: Sequence[Patch], path) -> None:
    atomic_write_text(path, _csv_text(PATCHES_HEADER, [
        (p.wsi_id, p.patch_id, p.grid_row, p.grid_col, _fmt(p.tissue_fraction)) for p in patches]))


def read_index(path) -> List[Tuple[str, int]]:
    """Row -> (wsi_id, patch_id) map for a GFX1 feature file."""
    return [(w, _int(p, "patch_id", path, line))
            for line, (w, p) in _read_csv(path, INDEX_HEADER)]


def write_index(keys: Sequence[Tuple[str, int]], path) -> None:
    atomic_write_text(path, _csv_text(INDEX_HEADER, keys))


# -- features ------------------------------------------------------------

def encode_features(matrix: FeatureMatrix) -> bytes:
    header = GFX_HEADER.pack(GFX_MAGIC, matrix.n_nodes, matrix.dim, 0)
    return header + np.ascontiguousarray(matrix.values, dtype="<f4").tobytes()


def decode_features(data: bytes, source="<bytes>") -> FeatureMatrix:
    if len(data) < GFX_HEADER.size:
        raise LengthError(f"{source}: {len(data)} bytes is shorter than the 16-byte header")
    magic, n, d, _reserved = GFX_HEADER.unpack_from(data)
    if magic != GFX_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {GFX_MAGIC!r}")
    expected = GFX_HEADER.size + 4 * n * d
    if len(data) != expected:
        raise LengthError(f"{source}: header declares {n}x{d} values ({expected} bytes), "
                          f"file has {len(data)} bytes")
    values = np.frombuffer(data, dtype="<f4", offset=GFX_HEADER.size).reshape(n, d)
    return FeatureMatrix(values.astype(np.float64))


def write_features(matrix: FeatureMatrix, path) -> None:
    """Write GFX1: magic, u32 n_nodes, u32 dim, u32 reserved, then f32 LE rows.

    Values are stored as float32; a float64 matrix loses precision on disk.
    """
    atomic_write_bytes(path, encode_features(matrix))


def write_feature_csv(matrix: FeatureMatrix, path) -> None:
    if matrix.row_keys is None:
        raise ValidationError("feature CSV needs row keys (wsi_id, patch_id)")
    header = INDEX_HEADER + [f"f{j}" for j in range(matrix.dim)]
    rows = [(w, p, *map(_fmt, vals)) for (w, p), vals in zip(matrix.row_keys, matrix.values)]
    atomic_write_text(path, _csv_text(header, rows))


def read_feature_csv(path) -> FeatureMatrix:
    keys, rows, width = [], [], None
    for line, fields in _read_csv(path, INDEX_HEADER, prefix_only=True):
        if width is None:
            width = len(fields) - 2
            if width < 1:
                raise ParseError(f"{path}: feature CSV has no feature columns", 1)
        keys.append((fields[0], _int(fields[1], "patch_id", path, line)))
        vals = [_float(v, f"feature f{j}", path, line) for j, v in enumerate(fields[2:])]
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError(f"{path}: line {line}: non-finite feature value")
        rows.append(vals)
    if not rows:
        raise FormatError(f"{path}: feature CSV has no rows")
    return FeatureMatrix(np.array(rows, dtype=np.float64), keys)


def read_features(path) -> FeatureMatrix:
    """Read a GFX1 binary or feature-CSV file (detected by the magic bytes)."""
    data = Path(path).read_bytes()
    if data[:4] == GFX_MAGIC or not data[:len("wsi_id")].lower().startswith(b"wsi_id"):
        return decode_features(data, path)
    return read_feature_csv(path)


# -- graphs --------------------------------------------------------------

def write_graph(graph: PatientGraph, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    atomic_write_text(d / "edges.csv", _csv_text(EDGES_HEADER, graph.edges))
    meta = {"patient_id": graph.patient_id, "n_nodes": graph.n_nodes,
            "node_offset_by_wsi": dict(graph.node_offset_by_wsi)}
    atomic_write_text(d / "graph.json", json.dumps(meta, indent=2) + "\n")


def read_graph(directory) -> PatientGraph:
    d = Path(directory)
    try:
        meta = json.loads((d / "graph.json").read_text(encoding="utf-8"))
        pid, n, offsets = meta["patient_id"], int(meta["n_nodes"]), meta["node_offset_by_wsi"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{d / 'graph.json'}: malformed graph sidecar ({exc})") from None
    edges = []
    for line, (u, v) in _read_csv(d / "edges.csv", EDGES_HEADER):
        edges.append((_int(u, "u", d / "edges.csv", line), _int(v, "v", d / "edges.csv", line)))
    g = PatientGraph(pid, n, tuple(edges), {k: int(o) for k, o in offsets.items()})
    g.validate()
    return g


# -- model / results -----------------------------------------------------

def model_to_dict(params: ModelParams, seed: Optional[int] = None) -> Dict:
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "layer_dims": list(params.layer_dims),
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
        "head_weight": params.head_weight.tolist(),
        "head_bias": params.head_bias,
        "seed": seed,
    }


def model_from_dict(obj: Dict) -> Tuple[ModelParams, Optional[int]]:
    try:
        if obj["format_version"] != MODEL_FORMAT_VERSION:
            raise FormatError(f"unsupported model format_version {obj['format_version']!r}")
        params = ModelParams(
            list(obj["layer_dims"]),
            [np.array(w, dtype=np.float64).reshape(a, b) for w, a, b in
             zip(obj["weights"], obj["layer_dims"][:-1], obj["layer_dims"][1:])],
            [np.array(b, dtype=np.float64) for b in obj["biases"]],
            np.array(obj["head_weight"], dtype=np.float64),
            float(obj["head_bias"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed model file ({exc})") from None
    for a in params.arrays():
        if not np.all(np.isfinite(a)):
            raise ValidationError("model contains non-finite parameters")
    return params, obj.get("seed")


def write_model(params: ModelParams, path, seed: Optional[int] = None) -> None:
    write_json(model_to_dict(params, seed), path)


def read_model(path) -> Tuple[ModelParams, Optional[int]]:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    return model_from_dict(obj)


def write_json(obj, path) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, allow_nan=False) + "\n")


def write_risks(ids: Sequence[str], risks, path) -> None:
    atomic_write_text(path, _csv_text(RISKS_HEADER, [(i, _fmt(r)) for i, r in zip(ids, risks)]))


def read_risks(path) -> "OrderedDict[str, float]":
    out: "OrderedDict[str, float]" = OrderedDict()
    for line, (pid, r) in _read_csv(path, RISKS_HEADER):
        if pid in out:
            raise ValidationError(f"{path}: line {line}: duplicate patient_id {pid!r}")
        out[pid] = _float(r, "risk", path, line)
    return out


def write_roc(curve, csv_path, json_path=None) -> None:
    rows = [(_fmt(t) if math.isfinite(t) else "inf", _fmt(x), _fmt(y))
            for t, (x, y) in zip(curve.thresholds, curve.points)]
    atomic_write_text(csv_path, _csv_text(ROC_HEADER, rows))
    if json_path is not None:
        write_json({"auc": curve.auc, "n_pos": curve.n_pos, "n_neg": curve.n_neg}, json_path)
