"""Dataset persistence as CSV or JSON, both exactly round-trippable.

CSV layout::

    # nv0orbit-dataset 1
    # meta {"protocol": "t1", ...}
    delay [s],B/A [1]
    0.0,0.62099...

Values use shortest round-trip float formatting, so reading a file back
gives bit-identical arrays.
"""

from __future__ import annotations

import csv
import io
import json
import re
from pathlib import Path

import numpy as np

from .experiments import Dataset

MAGIC = "nv0orbit-dataset"
VERSION = 1
_HEADER_CELL = re.compile(r"^(?P<label>.*) \[(?P<unit>[^\[\]]*)\]$")


class DatasetFormatError(ValueError):
    pass


def _fmt(v: float) -> str:
    return repr(float(v))


def dataset_to_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    buf.write(f"# {MAGIC} {VERSION}\n")
    buf.write("# meta " + json.dumps(ds.meta, sort_keys=True, ensure_ascii=False) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"{ds.x_label} [{ds.x_unit}]"] + [f"{lab} [{ds.y_unit}]" for lab in ds.y_labels])
    rows = ds.rows
    for i, x in enumerate(ds.x):
        writer.writerow([_fmt(x)] + [_fmt(v) for v in rows[:, i]])
    return buf.getvalue()


def dataset_from_csv(text: str) -> Dataset:
    # split on newlines only; meta strings may hold other line-break code points
    lines = [line.rstrip("\r") for line in text.split("\n")]
    if lines and lines[-1] == "":
        lines.pop()
    meta = {}
    body_start = 0
    while body_start < len(lines) and lines[body_start].startswith("#"):
        line = lines[body_start]
        if line.startswith("# meta "):
            try:
                meta = json.loads(line[len("# meta "):])
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"line {body_start + 1}: bad meta JSON: {exc}") from None
        body_start += 1
    reader = csv.reader(lines[body_start:])
    try:
        header = next(reader)
    except StopIteration:
        raise DatasetFormatError("missing header row") from None
    parsed = []
    for k, cell in enumerate(header):
        m = _HEADER_CELL.match(cell)
        if not m:
            raise DatasetFormatError(f"header column {k + 1} {cell!r} lacks a '[unit]' label")
        parsed.append((m.group("label"), m.group("unit")))
    if len(parsed) < 2:
        raise DatasetFormatError("need an x column and at least one y column")
    y_units = {u for _, u in parsed[1:]}
    if len(y_units) != 1:
        raise DatasetFormatError(f"y columns have mixed units {sorted(y_units)}")
    values = []
    for n, row in enumerate(reader, start=body_start + 2):
        if not row:
            continue
        if len(row) != len(parsed):
            raise DatasetFormatError(f"line {n}: expected {len(parsed)} columns, got {len(row)}")
        try:
            values.append([float(c) for c in row])
        except ValueError as exc:
            raise DatasetFormatError(f"line {n}: {exc}") from None
    arr = np.array(values, dtype=float).reshape(-1, len(parsed))
    y = arr[:, 1:].T
    if y.shape[0] == 1:
        y = y[0]
    return Dataset(arr[:, 0], y, parsed[0][1], y_units.pop(), parsed[0][0],
                   tuple(lab for lab, _ in parsed[1:]), meta)


def dataset_to_json(ds: Dataset) -> str:
    payload = {
        "format": MAGIC,
        "version": VERSION,
        "x": {"label": ds.x_label, "unit": ds.x_unit, "values": [float(v) for v in ds.x]},
        "y": {"labels": list(ds.y_labels), "unit": ds.y_unit,
              "values": [[float(v) for v in row] for row in ds.rows]},
        "meta": ds.meta,
    }
    return json.dumps(payload, indent=1, sort_keys=True, ensure_ascii=False) + "\n"


def dataset_from_json(text: str) -> Dataset:
    try:
        payload = json.loads(text)
        if payload.get("format") != MAGIC:
            raise DatasetFormatError("not a dataset document")
        x, y = payload["x"], payload["y"]
        rows = np.array(y["values"], dtype=float).reshape(len(y["labels"]), -1)
        return Dataset(x["values"], rows[0] if rows.shape[0] == 1 else rows, x["unit"], y["unit"],
                       x["label"], tuple(y["labels"]), payload.get("meta", {}))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"malformed dataset JSON: {exc}") from None


def write_dataset(ds: Dataset, path, fmt: str | None = None) -> Path:
    path = Path(path)
    fmt = fmt or ("json" if path.suffix == ".json" else "csv")
    text = dataset_to_json(ds) if fmt == "json" else dataset_to_csv(ds)
    path.write_text(text, encoding="utf-8")
    return path


def read_dataset(path) -> Dataset:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json" or text.lstrip().startswith("{"):
        return dataset_from_json(text)
    return dataset_from_csv(text)
