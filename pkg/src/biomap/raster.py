"""Minimal band-sequential raster container.

File layout: one line of JSON (the header) terminated by ``\\n``, followed by
the payload: little-endian values, band-sequential, row-major within a band.

Header keys: ``width``, ``height``, ``x_min``, ``y_min``, ``cell_size_m``,
``dtype`` (``f32`` | ``u8`` | ``i16``), ``band_names``, ``nodata``. A NaN
nodata is written as the string ``"NaN"`` so the header stays strict JSON.
"""

import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from biomap.geogrid import GridSpec

DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1"), "i16": np.dtype("<i2")}
_REQUIRED = ("width", "height", "x_min", "y_min", "cell_size_m", "dtype", "band_names", "nodata")


class RasterFormatError(ValueError):
    pass


@dataclass
class RasterFile:
    grid: GridSpec
    dtype: str
    data: np.ndarray  # (bands, height, width)
    band_names: list[str] = field(default_factory=list)
    nodata: float | int | None = None

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise RasterFormatError(f"unsupported dtype {self.dtype!r}")
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[None]
        if data.shape[1:] != self.grid.shape:
            raise RasterFormatError(f"data shape {data.shape[1:]} != grid shape {self.grid.shape}")
        self.data = np.ascontiguousarray(data, dtype=DTYPES[self.dtype])
        if not self.band_names:
            self.band_names = [f"band_{i}" for i in range(self.data.shape[0])]
        if len(self.band_names) != self.data.shape[0]:
            raise RasterFormatError("band_names length does not match band count")

    @property
    def n_bands(self) -> int:
        return self.data.shape[0]

    def band(self, name: str) -> np.ndarray:
        return self.data[self.band_names.index(name)]

    def header(self) -> dict:
        return make_header(self.grid, self.dtype, self.band_names, self.nodata)


def make_header(grid: GridSpec, dtype: str, band_names, nodata) -> dict:
    if dtype not in DTYPES:
        raise RasterFormatError(f"unsupported dtype {dtype!r}")
    if isinstance(nodata, float) and math.isnan(nodata):
        nodata = "NaN"
    return {
        "width": grid.width,
        "height": grid.height,
        "x_min": grid.x_min,
        "y_min": grid.y_min,
        "cell_size_m": grid.cell_size,
        "dtype": dtype,
        "band_names": list(band_names),
        "nodata": nodata,
    }


def _encode(raster: RasterFile) -> bytes:
    head = json.dumps(raster.header(), separators=(",", ":"), allow_nan=False)
    return head.encode("utf-8") + b"\n" + raster.data.tobytes(order="C")


def raster_write(path, raster: RasterFile) -> None:
    """Write atomically: a temp file in the target directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp_", suffix=".rast")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_encode(raster))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_header(line: bytes, path) -> dict:
    try:
        head = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise RasterFormatError(f"{path}: corrupt header at byte {getattr(exc, 'pos', 0)}: {exc}")
    if not isinstance(head, dict):
        raise RasterFormatError(f"{path}: header is not a JSON object")
    missing = [k for k in _REQUIRED if k not in head]
    if missing:
        raise RasterFormatError(f"{path}: header missing keys {missing}")
    if head["dtype"] not in DTYPES:
        raise RasterFormatError(f"{path}: unsupported dtype {head['dtype']!r}")
    if not isinstance(head["band_names"], list) or not head["band_names"]:
        raise RasterFormatError(f"{path}: band_names must be a non-empty list")
    return head


def raster_read(path) -> RasterFile:
    with open(path, "rb") as fh:
        blob = fh.read()
    nl = blob.find(b"\n")
    if nl < 0:
        raise RasterFormatError(f"{path}: no header terminator found in {len(blob)} bytes")
    head = _parse_header(blob[:nl], path)
    try:
        grid = GridSpec(
            x_min=float(head["x_min"]),
            y_min=float(head["y_min"]),
            width=int(head["width"]),
            height=int(head["height"]),
            cell_size=float(head["cell_size_m"]),
        )
    except (TypeError, ValueError) as exc:
        raise RasterFormatError(f"{path}: invalid grid in header: {exc}")
    dt = DTYPES[head["dtype"]]
    bands = len(head["band_names"])
    expected = grid.width * grid.height * bands * dt.itemsize
    actual = len(blob) - nl - 1
    if actual != expected:
        raise RasterFormatError(
            f"{path}: payload starting at byte {nl + 1} has {actual} bytes, expected {expected} "
            f"({bands} band(s) x {grid.height}x{grid.width} x {dt.itemsize} bytes)"
        )
    data = np.frombuffer(blob, dtype=dt, offset=nl + 1).reshape(bands, grid.height, grid.width)
    nodata = head["nodata"]
    if nodata == "NaN":
        nodata = float("nan")
    return RasterFile(grid, head["dtype"], data.copy(), head["band_names"], nodata)


class RasterWriter:
    """Windowed writer: the payload is memory-mapped and filled tile by tile.

    The file is built under a temporary name and renamed into place by
    :meth:`commit`; :meth:`abort` discards it.
    """

    def __init__(self, path, grid: GridSpec, dtype: str, band_names, nodata=None):
        self.path = os.fspath(path)
        self.header = make_header(grid, dtype, band_names, nodata)
        directory = os.path.dirname(os.path.abspath(self.path))
        os.makedirs(directory, exist_ok=True)
        fd, self.tmp = tempfile.mkstemp(dir=directory, prefix=".tmp_", suffix=".rast")
        head = json.dumps(self.header, separators=(",", ":"), allow_nan=False).encode("utf-8") + b"\n"
        shape = (len(band_names),) + grid.shape
        with os.fdopen(fd, "wb") as fh:
            fh.write(head)
            fh.truncate(len(head) + int(np.prod(shape)) * DTYPES[dtype].itemsize)
        self.data = np.memmap(self.tmp, dtype=DTYPES[dtype], mode="r+", offset=len(head), shape=shape)

    def write_window(self, rows: slice, cols: slice, values) -> None:
        """``values`` is ``(bands, h, w)`` (or ``(h, w)`` for one band)."""
        values = np.asarray(values)
        if values.ndim == 2:
            values = values[None]
        self.data[:, rows, cols] = values

    def commit(self) -> None:
        self.data.flush()
        del self.data
        os.replace(self.tmp, self.path)

    def abort(self) -> None:
        self.data = None
        if os.path.exists(self.tmp):
            os.unlink(self.tmp)
