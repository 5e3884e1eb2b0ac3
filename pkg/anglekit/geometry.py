"""
Keypoint geometry: frame transforms, Gaussian heatmaps and crop windows.

Points are in pixel-index coordinates: the center of pixel (row r, column c) is
(x=c, y=r), origin top-left, x rightward, y downward. Every frame change in the
pipeline (raw -> half -> resized -> padded -> crop -> heatmap) is carried as a
SimilarityTransform2D so that any decoded point can be mapped back exactly.
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field

from anglekit.errors import GeometryError, NoResponseError

logger = logging.getLogger('anglekit_geometry')


@dataclass(frozen=True)
class Point2D:
    x: float
    y: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise GeometryError(f"Point must be finite, got ({self.x}, {self.y})")

    def distance(self, other: "Point2D") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def as_tuple(self) -> Tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class SimilarityTransform2D:
    """
    Axis-aligned similarity map: x' = a*x + tx, y' = sy*y + ty, where a = -sx when
    mirror_x is set and a = sx otherwise.
    """
    sx: float = 1.0
    sy: float = 1.0
    tx: float = 0.0
    ty: float = 0.0
    mirror_x: bool = False

    def __post_init__(self) -> None:
        for name, value in (("sx", self.sx), ("sy", self.sy), ("tx", self.tx), ("ty", self.ty)):
            if not math.isfinite(value):
                raise GeometryError(f"Transform coefficient {name} must be finite, got {value}")
        if self.sx == 0 or self.sy == 0:
            raise GeometryError(f"Transform scales must be nonzero, got sx={self.sx}, sy={self.sy}")

    @classmethod
    def identity(cls) -> "SimilarityTransform2D":
        return cls()

    @classmethod
    def scale(cls, sx: float, sy: Optional[float] = None) -> "SimilarityTransform2D":
        return cls(sx=sx, sy=sx if sy is None else sy)

    @classmethod
    def translation(cls, tx: float, ty: float) -> "SimilarityTransform2D":
        return cls(tx=tx, ty=ty)

    @classmethod
    def mirror(cls, width: int) -> "SimilarityTransform2D":
        """Horizontal flip of a grid `width` columns wide: column j <-> width-1-j."""
        return cls(tx=float(width - 1), mirror_x=True)

    @classmethod
    def from_linear(cls, a: float, sy: float, tx: float, ty: float) -> "SimilarityTransform2D":
        return cls(sx=abs(a), sy=sy, tx=tx, ty=ty, mirror_x=a < 0)

    @property
    def a(self) -> float:
        return -self.sx if self.mirror_x else self.sx

    def apply(self, p: Point2D) -> Point2D:
        return Point2D(self.a * p.x + self.tx, self.sy * p.y + self.ty)

    def apply_xy(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        out = np.empty_like(xy)
        out[..., 0] = self.a * xy[..., 0] + self.tx
        out[..., 1] = self.sy * xy[..., 1] + self.ty
        return out

    def inverse(self) -> "SimilarityTransform2D":
        a = self.a
        return SimilarityTransform2D.from_linear(1.0 / a, 1.0 / self.sy, -self.tx / a, -self.ty / self.sy)

    def then(self, other: "SimilarityTransform2D") -> "SimilarityTransform2D":
        """Transform that applies `self` first and `other` second."""
        a = other.a * self.a
        return SimilarityTransform2D.from_linear(
            a,
            other.sy * self.sy,
            other.a * self.tx + other.tx,
            other.sy * self.ty + other.ty,
        )

    def as_dict(self) -> dict:
        return {"sx": self.sx, "sy": self.sy, "tx": self.tx, "ty": self.ty, "mirror_x": self.mirror_x}


def apply_transform(t: SimilarityTransform2D, p: Point2D) -> Point2D:
    return t.apply(p)


def invert(t: SimilarityTransform2D) -> SimilarityTransform2D:
    return t.inverse()


def compose(*transforms: SimilarityTransform2D) -> SimilarityTransform2D:
    """Chain transforms left to right: compose(a, b)(p) == b(a(p))."""
    out = SimilarityTransform2D.identity()
    for t in transforms:
        out = out.then(t)
    return out


class GaussianSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    # heatmap-frame pixels
    sigma: float = Field(default=4.0, gt=0)


@dataclass(frozen=True, eq=False)
class Heatmap:
    values: np.ndarray
    stride: int = 1

    def __post_init__(self) -> None:
        if self.values.ndim != 2 or self.values.size == 0:
            raise GeometryError(f"Heatmap must be a nonempty 2D grid, got shape {self.values.shape}")
        if self.stride < 1:
            raise GeometryError(f"Heatmap stride must be >= 1, got {self.stride}")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise GeometryError("Heatmap values must lie in [0, 1]")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def to_network(self) -> SimilarityTransform2D:
        """Heatmap frame -> network-input frame."""
        return SimilarityTransform2D.scale(float(self.stride))


def encode_heatmap(
    center: Point2D,
    shape: Tuple[int, int],
    spec: GaussianSpec = GaussianSpec(),
    stride: int = 1,
) -> Heatmap:
    """Render exp(-d^2 / (2 sigma^2)) around `center` on an (Hh, Wh) grid."""
    hh, wh = shape
    if not (0 <= center.x < wh and 0 <= center.y < hh):
        raise GeometryError(f"Heatmap center ({center.x}, {center.y}) outside grid {wh}x{hh}")
    two_sigma_sq = 2.0 * spec.sigma ** 2
    gx = np.exp(-((np.arange(wh, dtype=np.float64) - center.x) ** 2) / two_sigma_sq)
    gy = np.exp(-((np.arange(hh, dtype=np.float64) - center.y) ** 2) / two_sigma_sq)
    return Heatmap(values=np.outer(gy, gx), stride=stride)


def decode_heatmap(hm: Heatmap, refine: bool = True) -> Tuple[Point2D, float]:
    """
    Locate the response peak of a heatmap.

    The global argmax is taken in row-major order, so ties resolve to the smallest
    (y, x). With `refine`, the location is the intensity-weighted centroid of the
    border-clamped 3x3 neighborhood around that argmax.

    Raises:
        NoResponseError: if the heatmap has no positive value
    """
    values = np.asarray(hm.values, dtype=np.float64)
    peak = float(values.max())
    if not peak > 0:
        raise NoResponseError("Heatmap carries no response")
    iy, ix = np.unravel_index(int(np.argmax(values)), values.shape)
    if not refine:
        return Point2D(float(ix), float(iy)), peak

    y0, y1 = max(iy - 1, 0), min(iy + 2, values.shape[0])
    x0, x1 = max(ix - 1, 0), min(ix + 2, values.shape[1])
    patch = values[y0:y1, x0:x1]
    mass = patch.sum()
    ys, xs = np.mgrid[y0:y1, x0:x1]
    cx = float((patch * xs).sum() / mass)
    cy = float((patch * ys).sum() / mass)
    return Point2D(cx, cy), peak


def window_offset(center: Point2D, size: Tuple[int, int], bounds: Tuple[int, int]) -> Tuple[int, int]:
    """
    Top-left corner of a (w, h) window nominally centered at `center`, shifted to lie
    inside a (height, width) `bounds` grid.
    """
    w, h = size
    bound_h, bound_w = bounds
    if w > bound_w or h > bound_h:
        raise GeometryError(f"Window {w}x{h} larger than source {bound_w}x{bound_h}")
    x0 = int(math.floor(center.x - w / 2.0 + 0.5))
    y0 = int(math.floor(center.y - h / 2.0 + 0.5))
    return min(max(x0, 0), bound_w - w), min(max(y0, 0), bound_h - h)


def crop_window(
    image: np.ndarray,
    center: Point2D,
    size: Tuple[int, int] = (384, 288),
) -> Tuple[np.ndarray, SimilarityTransform2D]:
    """
    Cut a (w, h) window around `center`, clamped to the image.

    Returns:
        The crop and the transform mapping crop-frame points to source-frame points.
    """
    w, h = size
    x0, y0 = window_offset(center, size, image.shape[:2])
    crop = np.ascontiguousarray(image[y0:y0 + h, x0:x0 + w])
    return crop, SimilarityTransform2D.translation(float(x0), float(y0))


def padded_extent(height: int, width: int, multiple: int = 32, min_side: int = 0) -> Tuple[int, int]:
    def _round_up(n: int) -> int:
        return max(int(math.ceil(n / multiple)) * multiple, min_side)
    return _round_up(height), _round_up(width)


def pad_to(image: np.ndarray, shape: Tuple[int, int]) -> Tuple[np.ndarray, SimilarityTransform2D]:
    """
    Zero-pad an image at the bottom/right up to `shape` (top-left anchored).

    Returns:
        The padded image and the padded-frame -> source-frame transform (identity).
    """
    out_h, out_w = shape
    h, w = image.shape[:2]
    if h > out_h or w > out_w:
        raise GeometryError(f"Cannot pad {w}x{h} image into {out_w}x{out_h}")
    padded = np.zeros((out_h, out_w) + image.shape[2:], dtype=image.dtype)
    padded[:h, :w] = image
    return padded, SimilarityTransform2D.identity()


def resize_image(image: np.ndarray, shape: Tuple[int, int]) -> Tuple[np.ndarray, SimilarityTransform2D]:
    """
    Bilinear resize of a 2D grid to (out_h, out_w).

    Pixel centers are aligned (half-pixel convention), so the returned
    resized-frame -> source-frame transform is x_src = (x + 0.5) * w / out_w - 0.5.
    """
    out_h, out_w = shape
    h, w = image.shape[:2]
    if h < 1 or w < 1:
        raise GeometryError(f"Cannot resize degenerate image of shape {image.shape}")
    if out_h < 1 or out_w < 1:
        raise GeometryError(f"Cannot resize to degenerate shape {shape}")
    src = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None, None]
    resized = F.interpolate(src, size=(out_h, out_w), mode="bilinear", align_corners=False, antialias=True)
    sx, sy = w / out_w, h / out_h
    to_source = SimilarityTransform2D(sx=sx, sy=sy, tx=0.5 * sx - 0.5, ty=0.5 * sy - 0.5)
    return resized[0, 0].numpy().clip(0.0, 1.0), to_source


def clamp_point(p: Point2D, width: int, height: int) -> Point2D:
    return Point2D(min(max(p.x, 0.0), width - 1.0), min(max(p.y, 0.0), height - 1.0))


def save_heatmap_png(hm: Heatmap, path: Path) -> Path:
    """Write a heatmap as 16-bit PNG with its stride in a `<name>.stride.txt` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(hm.values * 65535.0).astype(np.uint16)).save(path)
    path.with_suffix(".stride.txt").write_text(f"stride={hm.stride}\n", encoding="utf-8")
    return path


def load_heatmap_png(path: Path) -> Heatmap:
    path = Path(path)
    values = np.asarray(Image.open(path), dtype=np.float64) / 65535.0
    stride = 1
    sidecar = path.with_suffix(".stride.txt")
    if sidecar.exists():
        stride = int(sidecar.read_text(encoding="utf-8").strip().split("=", 1)[1])
    return Heatmap(values=values.clip(0.0, 1.0), stride=stride)


def save_overlay_png(image: np.ndarray, heat: np.ndarray, path: Path,
                     points: Tuple[Point2D, ...] = (), alpha: float = 0.5) -> Path:
    """
    Blend a [0,1] response map (already in the image frame) over a grayscale image.
    The first point is marked red, any further points yellow.
    """
    gray = np.clip(image, 0.0, 1.0)
    rgb = np.stack([gray, gray, gray], axis=-1)
    rgb[..., 0] = (1 - alpha) * rgb[..., 0] + alpha * np.clip(heat, 0.0, 1.0)
    rgb = (rgb * 255.0).round().astype(np.uint8)
    colors = [(255, 0, 0)] + [(255, 220, 0)] * max(len(points) - 1, 0)
    h, w = gray.shape
    for p, color in zip(points, colors):
        cx, cy = int(round(p.x)), int(round(p.y))
        rgb[max(cy - 2, 0):min(cy + 3, h), max(cx - 2, 0):min(cx + 3, w)] = color
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb).save(path)
    return path
