"""
Export Module

Result rows written as CSV and weight templates written as binary PGM/PPM grids.

CSV files carry one header line, comma-separated fields, unquoted strings and
floats with 6 significant digits. Image grids tile templates row-major with
1-pixel separators of value 0 and no outer border; each template is min-max
normalized to 0..255 on its own.
"""

import csv
import math
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple, Type, TypeVar, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from merge_lab.errors import DimensionError, DomainError
from merge_lab.tensor.core import Tensor
from merge_lab.utils.logger import get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]

Metric = Literal["accuracy", "loss", "gap", "bound", "empirical", "cosine", "plain_cosine"]


class CsvRow(BaseModel):
    """Base for CSV schemas; the column order is the field order."""

    model_config = ConfigDict(frozen=True)

    @field_validator("*")
    @classmethod
    def _check_cell(cls, value: object) -> object:
        if isinstance(value, str) and ("," in value or "\n" in value):
            raise ValueError(f"CSV cells cannot contain commas or newlines: {value!r}")
        if isinstance(value, float) and not math.isfinite(value):
            raise ValueError("CSV values must be finite")
        return value

    @classmethod
    def header(cls) -> str:
        return ",".join(cls.model_fields)

    def to_line(self) -> str:
        return ",".join(format_cell(getattr(self, name)) for name in type(self).model_fields)


class ResultRow(CsvRow):
    """One measured value of one method at one pool size and magnitude factor."""

    experiment: str
    method: str
    n_models: int = Field(ge=0)
    factor: float
    seed: int = Field(ge=0)
    metric: Metric
    value: float


class TrainLogRow(CsvRow):
    model: int = Field(ge=0)
    epoch: int = Field(ge=1)
    train_loss: float
    val_accuracy: float


class ScatterRow(CsvRow):
    """Paired soup and logits-ensemble accuracy on one test batch."""

    factor: float
    n_models: int = Field(ge=1)
    batch: int = Field(ge=0)
    soup_accuracy: float
    ens_accuracy: float


class BoundRow(CsvRow):
    check: str
    tau: float
    bound_value: float
    empirical: float
    violation_rate: float
    guaranteed_prob: float
    holds: bool
    exact_violations: int


RowT = TypeVar("RowT", bound=CsvRow)


def format_cell(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def append_csv(
    rows: Sequence[CsvRow], path: PathLike, row_type: Optional[Type[CsvRow]] = None
) -> None:
    """
    Append rows to a CSV file, writing the header first if the file is new or empty.

    Args:
        rows (Sequence[CsvRow]): Rows of one schema.
        path (PathLike): Target file.
        row_type (Optional[Type[CsvRow]]): Schema for the header; defaults to the
            type of the first row, or ResultRow for an empty list.
    """
    schema = row_type or (type(rows[0]) if rows else ResultRow)
    for row in rows:
        if type(row) is not schema:
            raise DomainError(f"cannot mix {type(row).__name__} rows into a {schema.__name__} file")
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    needs_header = not target.exists() or target.stat().st_size == 0
    with open(target, "a", encoding="utf-8", newline="") as f:
        if needs_header:
            f.write(schema.header() + "\n")
        for row in rows:
            f.write(row.to_line() + "\n")


def read_csv_rows(path: PathLike, row_type: Type[RowT]) -> List[RowT]:
    """Parse a CSV written by append_csv back into rows."""
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != list(row_type.model_fields):
            raise DomainError(f"{path} header {reader.fieldnames} does not match {row_type.__name__}")
        return [row_type(**record) for record in reader]


def _normalize_tile(values: np.ndarray) -> np.ndarray:
    low, high = float(np.min(values)), float(np.max(values))
    if high == low:
        return np.zeros(values.shape, dtype=np.uint8)
    scaled = np.rint((values - low) / (high - low) * 255.0)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def tile_templates(templates: Tensor, h: int, w: int, channels: int, cols: int) -> np.ndarray:
    """
    Arrange normalized templates on a grid.

    Returns:
        np.ndarray: uint8 canvas of shape (rows*h + rows-1, cols*w + cols-1, channels).
    """
    templates = np.asarray(templates, dtype=np.float64)
    if templates.ndim != 2 or templates.shape[0] == 0:
        raise DomainError(f"expected a non-empty [k x dim] template matrix, got {templates.shape}")
    if templates.shape[1] != h * w * channels:
        raise DimensionError(
            f"template dim {templates.shape[1]} does not match {h}x{w}x{channels}"
        )
    if cols < 1:
        raise DomainError(f"cols must be positive, got {cols}")
    count = templates.shape[0]
    cols = min(cols, count)
    rows = -(-count // cols)
    canvas = np.zeros((rows * h + rows - 1, cols * w + cols - 1, channels), dtype=np.uint8)
    for k in range(count):
        r, c = divmod(k, cols)
        tile = _normalize_tile(templates[k]).reshape(h, w, channels)
        canvas[r * (h + 1) : r * (h + 1) + h, c * (w + 1) : c * (w + 1) + w] = tile
    return canvas


def _write_pnm(canvas: np.ndarray, magic: bytes, path: PathLike) -> None:
    height, width = canvas.shape[:2]
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "wb") as f:
        f.write(magic + b"\n" + f"{width} {height}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(canvas).tobytes())
    logger.debug(f"Wrote {width}x{height} {magic.decode()} grid to {target}")


def write_pgm_grid(templates: Tensor, h: int, w: int, cols: int, path: PathLike) -> None:
    """Write grayscale templates (dim == h*w) as a binary PGM (P5) grid."""
    _write_pnm(tile_templates(templates, h, w, 1, cols)[:, :, 0], b"P5", path)


def write_ppm_grid(templates: Tensor, h: int, w: int, cols: int, path: PathLike) -> None:
    """Write RGB templates (dim == h*w*3) as a binary PPM (P6) grid."""
    _write_pnm(tile_templates(templates, h, w, 3, cols), b"P6", path)


def read_pnm(path: PathLike) -> Tuple[bytes, np.ndarray]:
    """
    Read a binary PGM or PPM written by this module.

    Returns:
        Tuple[bytes, np.ndarray]: The magic (b"P5" or b"P6") and a (height, width)
        or (height, width, 3) uint8 array.
    """
    data = Path(path).read_bytes()
    magic, dims, maxval, pixels = data.split(b"\n", 3)
    if magic not in (b"P5", b"P6") or maxval != b"255":
        raise DomainError(f"{path} is not an 8-bit binary PGM/PPM")
    width, height = (int(v) for v in dims.split())
    shape = (height, width) if magic == b"P5" else (height, width, 3)
    return magic, np.frombuffer(pixels, dtype=np.uint8).reshape(shape)
