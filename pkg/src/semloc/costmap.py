"""Binary semantic masks and the smooth [0,1] cost maps built from them.

The alignment objective samples these maps at projected landmark locations;
a value of 1.0 means "on the landmark" and the residual is value - 1. Two
builders are provided: the production one keeps a flat plateau around the
mask and ramps down linearly in chessboard distance, and a truncated
Euclidean-distance-transform variant serves as a comparison baseline.
Signboards get their filled blobs reduced to outline edges first, so the
ridge of the map sits on the projected boundary polygon.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from .errors import OutOfBounds, ParseError, ValidationError
from .hdmap import LandmarkClass

DEFAULT_PLATEAU = 2
DEFAULT_RAMP = 20
DEFAULT_TRUNCATION = 20.0

_EDGE_KERNEL = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], np.uint8)


@dataclass(frozen=True)
class SegMask:
    width: int
    height: int
    cls: LandmarkClass
    data: np.ndarray  # (height, width) uint8, 0 or 1

    def __post_init__(self) -> None:
        d = np.asarray(self.data, dtype=np.uint8)
        if d.shape != (self.height, self.width):
            raise ValidationError(
                f"mask shape {d.shape} != ({self.height}, {self.width})"
            )
        object.__setattr__(self, "data", d)

    @classmethod
    def empty(cls, width: int, height: int, lm_cls: LandmarkClass) -> "SegMask":
        return cls(width, height, lm_cls, np.zeros((height, width), dtype=np.uint8))


@dataclass(frozen=True)
class CostMap:
    width: int
    height: int
    cls: LandmarkClass
    data: np.ndarray  # (height, width) float64 in [0,1]


def _chessboard_distance(occupied: np.ndarray) -> np.ndarray:
    """Exact chessboard distance (int) from every pixel to the occupied set.

    DIST_C with a 3x3 mask is the (1,1) chamfer, which is exact for the
    chessboard metric; computed in C it beats the scipy equivalent 2-3x on
    camera-sized masks, which matters because this runs per class per camera
    per frame.
    """
    src = np.ascontiguousarray((~occupied).astype(np.uint8))
    return cv2.distanceTransform(src, cv2.DIST_C, 3).astype(np.int32)


def _ramp(dist: np.ndarray, plateau: int, ramp_width: int) -> np.ndarray:
    eff = np.maximum(dist - plateau, 0)
    return np.maximum(0.0, 1.0 - eff / float(ramp_width))


def build_costmap_morphology(
    mask: SegMask,
    plateau_dilate: int = DEFAULT_PLATEAU,
    ramp_width: int = DEFAULT_RAMP,
    erode: int = 0,
) -> CostMap:
    """Flat-topped cost map: 1.0 on the (plateau-dilated) mask, then a linear
    ramp to 0 over ramp_width pixels of chessboard distance.

    erode > 0 runs a denoising binary erosion first; off by default since
    synthetic masks are clean.
    """
    if ramp_width < 1:
        raise ValidationError("ramp_width must be >= 1")
    occ = mask.data.astype(bool)
    if erode > 0:
        occ = ndimage.binary_erosion(occ, iterations=erode)
    if not occ.any():
        return CostMap(mask.width, mask.height, mask.cls, np.zeros(occ.shape))
    values = _ramp(_chessboard_distance(occ), plateau_dilate, ramp_width)
    return CostMap(mask.width, mask.height, mask.cls, values)


def extract_edges(occupied: np.ndarray) -> np.ndarray:
    """Occupied pixels touching the background in their 4-neighborhood
    (image border counts as background).

    Implemented as occupied minus its cross-kernel erosion, which matches a
    nonzero 4-neighbor discrete-Laplacian response pixel for pixel and is
    far cheaper than a convolution.
    """
    src = np.ascontiguousarray(occupied.astype(np.uint8))
    interior = cv2.erode(src, _EDGE_KERNEL, borderValue=0)
    return occupied & (interior == 0)


def build_costmap_signboard(
    mask: SegMask,
    plateau_dilate: int = DEFAULT_PLATEAU,
    ramp_width: int = DEFAULT_RAMP,
) -> CostMap:
    """Edge-extracted variant for filled signboard blobs: the map peaks on the
    blob outline rather than its interior."""
    if ramp_width < 1:
        raise ValidationError("ramp_width must be >= 1")
    occ = mask.data.astype(bool)
    edges = extract_edges(occ)
    if not edges.any():
        return CostMap(mask.width, mask.height, mask.cls, np.zeros(occ.shape))
    values = _ramp(_chessboard_distance(edges), plateau_dilate, ramp_width)
    return CostMap(mask.width, mask.height, mask.cls, values)


def build_costmap_distance_transform(
    mask: SegMask, truncation: float = DEFAULT_TRUNCATION
) -> CostMap:
    """Baseline builder: value = max(0, 1 - EDT/truncation) with the exact
    Euclidean distance transform."""
    if truncation <= 0.0:
        raise ValidationError("truncation must be positive")
    occ = mask.data.astype(bool)
    if not occ.any():
        return CostMap(mask.width, mask.height, mask.cls, np.zeros(occ.shape))
    edt = ndimage.distance_transform_edt(~occ)
    values = np.maximum(0.0, 1.0 - edt / truncation)
    return CostMap(mask.width, mask.height, mask.cls, values)


def build_class_costmaps(
    masks: dict,
    plateau_dilate: int = DEFAULT_PLATEAU,
    ramp_width: int = DEFAULT_RAMP,
) -> dict:
    """Build one cost map per class from a class->SegMask dict, routing
    signboards through the edge-extracting builder."""
    out = {}
    for cls, mask in masks.items():
        if cls is LandmarkClass.SIGNBOARD:
            out[cls] = build_costmap_signboard(mask, plateau_dilate, ramp_width)
        else:
            out[cls] = build_costmap_morphology(mask, plateau_dilate, ramp_width)
    return out


def bilinear_batch(data: np.ndarray, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized bilinear value + analytic gradient.

    Callers guarantee uv lies in [0, W-1] x [0, H-1]; coordinates exactly on
    the far edge are folded into the last cell.
    """
    h, w = data.shape
    x = uv[..., 0]
    y = uv[..., 1]
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 2)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 2)
    fx = x - x0
    fy = y - y0
    v00 = data[y0, x0]
    v10 = data[y0, x0 + 1]
    v01 = data[y0 + 1, x0]
    v11 = data[y0 + 1, x0 + 1]
    value = (
        (1.0 - fx) * (1.0 - fy) * v00
        + fx * (1.0 - fy) * v10
        + (1.0 - fx) * fy * v01
        + fx * fy * v11
    )
    grad = np.stack(
        [
            (1.0 - fy) * (v10 - v00) + fy * (v11 - v01),
            (1.0 - fx) * (v01 - v00) + fx * (v11 - v10),
        ],
        axis=-1,
    )
    return value, grad


def sample_bilinear(cmap: CostMap, u: np.ndarray) -> tuple[float, np.ndarray]:
    u = np.asarray(u, dtype=float).reshape(2)
    if not (0.0 <= u[0] <= cmap.width - 1 and 0.0 <= u[1] <= cmap.height - 1):
        raise OutOfBounds(f"sample {u} outside [0,{cmap.width - 1}]x[0,{cmap.height - 1}]")
    value, grad = bilinear_batch(cmap.data, u[None, :])
    return float(value[0]), grad[0]


# ---------------------------------------------------------------------------
# Image I/O: PGM (P5) for binary masks, PFM (Pf) for float cost maps.


def save_mask(mask: SegMask, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(f"P5\n{mask.width} {mask.height}\n255\n".encode())
        fh.write((mask.data * 255).astype(np.uint8).tobytes())


def load_mask(path: str | Path, cls: LandmarkClass) -> SegMask:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise ParseError(f"{path}: not a P5 PGM file")
        dims = fh.readline().split()
        width, height = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        raw = np.frombuffer(fh.read(width * height), dtype=np.uint8)
    data = (raw.reshape(height, width) > maxval // 2).astype(np.uint8)
    return SegMask(width, height, cls, data)


def save_costmap(cmap: CostMap, path: str | Path) -> None:
    # PFM stores rows bottom-to-top; scale -1 marks little-endian floats.
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{cmap.width} {cmap.height}\n-1.0\n".encode())
        fh.write(cmap.data[::-1].astype("<f4").tobytes())


def load_costmap(path: str | Path, cls: LandmarkClass) -> CostMap:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"Pf":
            raise ParseError(f"{path}: not a Pf PFM file")
        dims = fh.readline().split()
        width, height = int(dims[0]), int(dims[1])
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        raw = np.frombuffer(fh.read(width * height * 4), dtype=dtype)
    data = raw.reshape(height, width)[::-1].astype(float)
    return CostMap(width, height, cls, data)
