"""ESRI ASCII raster I/O.

Arrays are (ny, nx) float64 with row 0 the southernmost row; files store
rows north to south per the format. Values are written with ``repr`` so
a write/read round trip reproduces every float bit-exactly, and writing
the same array twice produces identical bytes.
"""

import numpy as np

from .errors import ConfigurationError

NODATA = -9999.0


def write_ascii_grid(path, data, xllcorner=0.0, yllcorner=0.0, cellsize=1.0, nodata=NODATA, mask=None):
    """Write ``data`` to ``path`` in ESRI ASCII grid format.

    ``mask``, if given, is a boolean array of the same shape; False cells
    are written as the nodata value.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ConfigurationError(f"ascii grid wants a 2-d array, got shape {data.shape}")
    ny, nx = data.shape
    with open(path, "w") as fh:
        fh.write(f"ncols {nx}\n")
        fh.write(f"nrows {ny}\n")
        fh.write(f"xllcorner {xllcorner!r}\n")
        fh.write(f"yllcorner {yllcorner!r}\n")
        fh.write(f"cellsize {cellsize!r}\n")
        fh.write(f"NODATA_value {nodata!r}\n")
        for j in range(ny - 1, -1, -1):
            row = data[j]
            if mask is not None:
                row = np.where(mask[j], row, nodata)
            fh.write(" ".join(repr(float(v)) for v in row))
            fh.write("\n")


def read_ascii_grid(path):
    """Read an ESRI ASCII grid.

    Returns ``(data, meta)`` where nodata cells are NaN and ``meta`` holds
    xllcorner, yllcorner, cellsize and nodata.
    """
    with open(path) as fh:
        header = {}
        for _ in range(6):
            key, value = fh.readline().split()
            header[key.lower()] = value
        try:
            nx = int(header["ncols"])
            ny = int(header["nrows"])
            meta = {
                "xllcorner": float(header["xllcorner"]),
                "yllcorner": float(header["yllcorner"]),
                "cellsize": float(header["cellsize"]),
                "nodata": float(header["nodata_value"]),
            }
        except (KeyError, ValueError) as exc:
            raise ConfigurationError(f"bad ascii grid header in {path}: {exc}") from exc
        body = fh.read().split()
    if len(body) != nx * ny:
        raise ConfigurationError(f"{path}: expected {nx * ny} values, found {len(body)}")
    flat = np.array([float(v) for v in body], dtype=np.float64)
    data = flat.reshape(ny, nx)[::-1].copy()
    data[data == meta["nodata"]] = np.nan
    return data, meta
