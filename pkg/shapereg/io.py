"""File formats: dataset and point CSVs, model JSON, JSON inputs and JSON-lines traces.

Floats are written with repr(), the shortest decimal that reads back to the same double.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path
from typing import Any, TypeVar

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from shapereg.errors import DataError, SchemaError, UnsupportedVersionError
from shapereg.model import MaxAffineModel
from shapereg.problem import Dataset, ShapeConstraint, dump_shape, parse_shape

log = logging.getLogger("shapereg.io")

MODEL_VERSION = 1

M = TypeVar("M", bound=BaseModel)


def _fmt(value: float) -> str:
    return repr(float(value))


def write_text_atomic(path: str | Path, text: str) -> Path:
    """Write a sibling .tmp file, then rename it over path."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, "utf-8")
    tmp.replace(path)
    return path


# ----- CSV -----

def _read_rows(path: str | Path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            rows = [(reader.line_num, r) for r in reader if r]
    except FileNotFoundError as exc:
        raise DataError(f"no such file: {path}") from exc
    except (UnicodeDecodeError, csv.Error) as exc:
        raise DataError(f"unreadable CSV {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path} is empty", line=1)
    header = [h.strip() for h in rows[0][1]]
    return header, rows[1:]


def _parse_matrix(path, header: list[str], rows) -> np.ndarray:
    width = len(header)
    out = np.empty((len(rows), width))
    for r, (line, cells) in enumerate(rows):
        if len(cells) != width:
            raise DataError(f"expected {width} fields, found {len(cells)}", line=line)
        for c, cell in enumerate(cells):
            try:
                value = float(cell)
            except ValueError:
                raise DataError(f"non-numeric value {cell.strip()!r}", line=line, column=c + 1) from None
            if not math.isfinite(value):
                raise DataError(f"non-finite value {cell.strip()!r}", line=line, column=c + 1)
            out[r, c] = value
    if out.shape[0] == 0:
        raise DataError(f"{path} has a header but no rows", line=2)
    return out


def _coordinate_header(d: int) -> list[str]:
    return [f"x{i + 1}" for i in range(d)]


def read_dataset_csv(path: str | Path) -> Dataset:
    """Dataset from a CSV with header x1,...,xd,y (one row per observation)."""
    header, rows = _read_rows(path)
    d = len(header) - 1
    if d < 1 or header != _coordinate_header(d) + ["y"]:
        raise DataError(f"header must be x1,...,xd,y; found {','.join(header)}", line=1)
    data = _parse_matrix(path, header, rows)
    return Dataset.from_points(data[:, :d], data[:, d])


def write_dataset_csv(dataset: Dataset, path: str | Path) -> Path:
    lines = [",".join(_coordinate_header(dataset.d) + ["y"])]
    for p, y in zip(dataset.points, dataset.Y):
        lines.append(",".join([_fmt(v) for v in p] + [_fmt(y)]))
    return write_text_atomic(Path(path), "\n".join(lines) + "\n")


def read_points_csv(path: str | Path) -> np.ndarray:
    """n x d query points from a CSV with header x1,...,xd (a trailing y column is ignored)."""
    header, rows = _read_rows(path)
    d = len(header) - (1 if header and header[-1] == "y" else 0)
    if d < 1 or header[:d] != _coordinate_header(d):
        raise DataError(f"header must be x1,...,xd; found {','.join(header)}", line=1)
    return _parse_matrix(path, header, rows)[:, :d]


def predictions_csv(model: MaxAffineModel, points: np.ndarray) -> str:
    """One row per point: coordinates, value and subgradient."""
    P = np.atleast_2d(points)
    values = np.atleast_1d(model.evaluate(P))
    grads = np.atleast_2d(model.subgradient(P))
    d = model.d
    header = _coordinate_header(d) + ["value"] + [f"g{i + 1}" for i in range(d)]
    lines = [",".join(header)]
    for p, v, g in zip(P, values, grads):
        lines.append(",".join([_fmt(x) for x in p] + [_fmt(v)] + [_fmt(x) for x in g]))
    return "\n".join(lines) + "\n"


# ----- JSON -----

def _load_json(path: str | Path) -> Any:
    try:
        text = Path(path).read_text("utf-8")
    except FileNotFoundError as exc:
        raise SchemaError(f"no such file: {path}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed JSON in {path}: {exc.msg}", line=exc.lineno, column=exc.colno) from exc


def _schema_error(exc: ValidationError, root: str) -> SchemaError:
    err = exc.errors()[0]
    where = ".".join(str(p) for p in err["loc"]) or root
    msg = "missing required field" if err["type"] == "missing" else err["msg"]
    return SchemaError(msg, field=where)


def read_json_model(path: str | Path, cls: type[M]) -> M:
    """Validate a JSON file against a pydantic model, naming the offending field on failure."""
    data = _load_json(path)
    try:
        return cls.model_validate(data)
    except ValidationError as exc:
        raise _schema_error(exc, cls.__name__) from exc


def read_shape_json(path: str | Path) -> ShapeConstraint:
    return parse_shape(_load_json(path))


class ModelFile(BaseModel):
    """On-disk model: xi and anchors hold n rows of d numbers."""

    model_config = ConfigDict(extra="forbid")

    version: int = MODEL_VERSION
    d: int = Field(ge=1)
    n: int = Field(ge=1)
    theta: list[float]
    xi: list[list[float]]
    anchors: list[list[float]]
    shape: dict[str, Any]
    meta: dict[str, Any] = Field(default_factory=dict)
    sign: float = 1.0

    @model_validator(mode="after")
    def check_sizes(self):
        if len(self.theta) != self.n:
            raise ValueError(f"theta has {len(self.theta)} entries, expected n={self.n}")
        for name in ("xi", "anchors"):
            rows = getattr(self, name)
            if len(rows) != self.n or any(len(r) != self.d for r in rows):
                raise ValueError(f"{name} must be {self.n} rows of {self.d} numbers")
        if self.sign not in (1.0, -1.0):
            raise ValueError("sign must be 1 or -1")
        return self

    @classmethod
    def from_model(cls, model: MaxAffineModel) -> "ModelFile":
        return cls(
            d=model.d, n=model.n, theta=model.theta.tolist(), xi=model.xi.tolist(),
            anchors=model.anchors.tolist(), shape=dump_shape(model.shape), meta=model.meta, sign=model.sign,
        )

    def to_model(self) -> MaxAffineModel:
        return MaxAffineModel(
            np.array(self.theta), np.array(self.xi).reshape(self.n, self.d),
            np.array(self.anchors).reshape(self.n, self.d), parse_shape(self.shape), dict(self.meta), self.sign,
        )


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_model(model: MaxAffineModel, path: str | Path) -> Path:
    data = _jsonable(ModelFile.from_model(model).model_dump())
    return write_text_atomic(Path(path), json.dumps(data, indent=2) + "\n")


def read_model(path: str | Path) -> MaxAffineModel:
    data = _load_json(path)
    if not isinstance(data, dict):
        raise SchemaError("model file must hold a JSON object", field="model")
    version = data.get("version")
    if version is None:
        raise SchemaError("missing required field", field="version")
    if version != MODEL_VERSION:
        raise UnsupportedVersionError(f"model file version {version!r} is not supported (expected {MODEL_VERSION})",
                                      field="version")
    try:
        return ModelFile.model_validate(data).to_model()
    except ValidationError as exc:
        raise _schema_error(exc, "model") from exc


# ----- traces -----

class TraceWriter:
    """Appends one JSON object per record; usable as a solver `trace` callable."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._fh = open(self.path, "a", encoding="utf-8")
        self.records = 0

    def __call__(self, record: dict) -> None:
        self._fh.write(json.dumps(_jsonable(record), sort_keys=True) + "\n")
        self._fh.flush()
        self.records += 1

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self) -> "TraceWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def dumps(result: Any) -> str:
    """JSON text for a CLI result (pydantic models, numpy values and non-finite floats allowed)."""
    if isinstance(result, BaseModel):
        result = result.model_dump(mode="json")
    return json.dumps(_jsonable(result), indent=2)
