"""Multi-layer raster terrain map.

Layers are ``(nx, ny)`` float64 arrays indexed ``[i, j]`` with ``i`` along
world x and ``j`` along world y.  Cell ``(i, j)`` has its center at
``origin + g * (i, j)`` (cell-center height convention).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .errors import InvalidDimensions, OutOfBounds
from .fee import PARAM_NAMES, SoilProperties

ELEVATION = "elevation"
LOOSE = "loose"
SIGMA = "sigma"
MEAN_LAYERS = tuple(f"mean_{p}" for p in PARAM_NAMES)
VAR_LAYERS = tuple(f"var_{p}" for p in PARAM_NAMES)
CORE_LAYERS = (ELEVATION, LOOSE, SIGMA) + MEAN_LAYERS + VAR_LAYERS

CellIndex = Tuple[int, int]

_MAGIC = b"TMAP"
_NAME_BYTES = 16


@dataclass
class GridMap:
    nx: int
    ny: int
    g: float
    origin: Tuple[float, float] = (0.0, 0.0)
    layers: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def H(self) -> np.ndarray:
        return self.layers[ELEVATION]

    @property
    def L(self) -> np.ndarray:
        return self.layers[LOOSE]

    @property
    def sigma(self) -> np.ndarray:
        return self.layers[SIGMA]

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.nx, self.ny)

    def in_bounds(self, i: int, j: int) -> bool:
        return 0 <= i < self.nx and 0 <= j < self.ny

    def cell_center(self, i, j):
        """World (x, y) of a cell center; works elementwise on arrays."""
        return self.origin[0] + self.g * np.asarray(i), self.origin[1] + self.g * np.asarray(j)

    def property_means(self) -> np.ndarray:
        """Stacked mean layers, shape ``(nx, ny, 5)``."""
        return np.stack([self.layers[k] for k in MEAN_LAYERS], axis=-1)

    def property_vars(self) -> np.ndarray:
        return np.stack([self.layers[k] for k in VAR_LAYERS], axis=-1)

    def copy(self) -> "GridMap":
        return GridMap(self.nx, self.ny, self.g, tuple(self.origin),
                       {k: v.copy() for k, v in self.layers.items()})


def new_map(nx: int, ny: int, g: float = 0.1, origin=(0.0, 0.0), h0: float = 0.0,
            sigma0: float = 0.0, theta0: SoilProperties | None = None,
            var0: Sequence[float] | None = None) -> GridMap:
    """Create a map with every cell set to the given priors and no loose soil."""
    if int(nx) <= 0 or int(ny) <= 0 or not g > 0:
        raise InvalidDimensions(f"need nx, ny > 0 and g > 0 (got {nx}, {ny}, {g})")
    if theta0 is None:
        theta0 = SoilProperties(c=0.0, phi=0.5, c_a=0.0, delta=0.3, gamma=1.6e4)
    var0 = np.ones(5) if var0 is None else np.asarray(var0, dtype=float)
    if var0.shape != (5,) or np.any(~(var0 > 0)):
        raise InvalidDimensions("var0 must hold five positive variances")
    shape = (int(nx), int(ny))
    layers = {
        ELEVATION: np.full(shape, float(h0)),
        LOOSE: np.zeros(shape),
        SIGMA: np.full(shape, float(sigma0)),
    }
    for name, mean, var in zip(PARAM_NAMES, theta0.as_array(), var0):
        layers[f"mean_{name}"] = np.full(shape, mean)
        layers[f"var_{name}"] = np.full(shape, var)
    return GridMap(shape[0], shape[1], float(g), (float(origin[0]), float(origin[1])), layers)


def world_to_cell(m: GridMap, x: float, y: float) -> CellIndex:
    """Nearest cell center; raises :class:`OutOfBounds` outside the raster."""
    i = math.floor((x - m.origin[0]) / m.g + 0.5)
    j = math.floor((y - m.origin[1]) / m.g + 0.5)
    if not m.in_bounds(i, j):
        raise OutOfBounds(f"({x}, {y}) maps to cell ({i}, {j}) outside {m.shape}")
    return i, j


def dda_trace(m: GridMap, start: CellIndex, direction, max_cells: int) -> List[CellIndex]:
    """Supercover traversal from the center of ``start`` along ``direction``.

    Returns the crossed cells in order, excluding ``start``.  A ray passing
    exactly through a cell corner steps diagonally.  Stops at the raster edge
    or after ``max_cells`` cells.
    """
    i, j = int(start[0]), int(start[1])
    if not m.in_bounds(i, j) or max_cells <= 0:
        return []
    return _dda_cells(i, j, float(direction[0]), float(direction[1]), max_cells, m.nx, m.ny)


def _dda_cells(i: int, j: int, dx: float, dy: float, max_cells: int,
               nx: int, ny: int) -> List[CellIndex]:
    # Cell-unit coordinates: the start center sits at (0, 0) and cell borders at +-0.5.
    step_i = 1 if dx > 0 else (-1 if dx < 0 else 0)
    step_j = 1 if dy > 0 else (-1 if dy < 0 else 0)
    t_max_x = 0.5 / abs(dx) if step_i else math.inf
    t_max_y = 0.5 / abs(dy) if step_j else math.inf
    t_dx = 1.0 / abs(dx) if step_i else math.inf
    t_dy = 1.0 / abs(dy) if step_j else math.inf
    out: List[CellIndex] = []
    if not (step_i or step_j):
        return out
    diagonal_ok = bool(step_i and step_j)
    while len(out) < max_cells:
        if diagonal_ok and abs(t_max_x - t_max_y) <= 1e-12 * max(t_max_x, t_max_y):
            i += step_i
            j += step_j
            t_max_x += t_dx
            t_max_y += t_dy
        elif t_max_x < t_max_y:
            i += step_i
            t_max_x += t_dx
        else:
            j += step_j
            t_max_y += t_dy
        if not (0 <= i < nx and 0 <= j < ny):
            break
        out.append((i, j))
    return out


def total_volume(m: GridMap, layer: str = ELEVATION) -> float:
    return float(m.g * m.g * np.sum(m.layers[layer]))


# ---------------------------------------------------------------------------
# Export / import
# ---------------------------------------------------------------------------

def save_layer_csv(m: GridMap, layer: str, path) -> None:
    """One row per ``i`` (x index), ``ny`` comma-separated values per row."""
    np.savetxt(path, m.layers[layer], delimiter=",", fmt="%.17g")


def load_layer_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=float))


def save_csv_dir(m: GridMap, directory, layers: Iterable[str] | None = None) -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name in layers or m.layers:
        p = directory / f"{name}.csv"
        save_layer_csv(m, name, p)
        written.append(p)
    return written


def save_binary(m: GridMap, path, layers: Iterable[str] | None = None) -> None:
    """Write the ``TMAP`` binary grid (little-endian, f32 values, row-major)."""
    names = list(layers or m.layers)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIIf", m.nx, m.ny, len(names), m.g))
        fh.write(struct.pack("<dd", *m.origin))
        for name in names:
            raw = name.encode("ascii")
            if len(raw) > _NAME_BYTES:
                raise ValueError(f"layer name {name!r} longer than {_NAME_BYTES} bytes")
            fh.write(raw.ljust(_NAME_BYTES, b"\0"))
            fh.write(np.ascontiguousarray(m.layers[name], dtype="<f4").tobytes())


def load_binary(path) -> GridMap:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a TMAP file")
    nx, ny, count, g = struct.unpack_from("<IIIf", data, 4)
    ox, oy = struct.unpack_from("<dd", data, 20)
    off = 36
    n = nx * ny
    layers = {}
    for _ in range(count):
        name = data[off:off + _NAME_BYTES].rstrip(b"\0").decode("ascii")
        off += _NAME_BYTES
        vals = np.frombuffer(data, dtype="<f4", count=n, offset=off)
        layers[name] = vals.astype(np.float64).reshape(nx, ny)
        off += 4 * n
    return GridMap(nx, ny, float(g), (ox, oy), layers)


def save_pgm(m: GridMap, layer: str, path) -> Tuple[float, float]:
    """8-bit binary PGM of one layer, min/max scaling written as a header comment.

    Non-finite cells are written as 0.  Returns the ``(min, max)`` used.
    """
    a = m.layers[layer]
    finite = np.isfinite(a)
    lo = float(a[finite].min()) if finite.any() else 0.0
    hi = float(a[finite].max()) if finite.any() else 0.0
    span = hi - lo
    scaled = np.zeros(a.shape) if span == 0 else (np.where(finite, a, lo) - lo) / span * 255.0
    img = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    # Image rows run along y so the picture has x to the right.
    img = img.T
    header = f"P5\n# layer={layer} min={lo!r} max={hi!r}\n{img.shape[1]} {img.shape[0]}\n255\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(img.tobytes())
    return lo, hi
