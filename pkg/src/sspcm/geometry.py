"""Coordinate frames, Gaussian heatmaps and affine warping.

Conventions: x grows rightward, y grows downward, pixel centers sit on
integer coordinates. A positive rotation maps (1, 0) onto (0, 1).
Heatmap coordinates are image coordinates divided by ``HEATMAP_STRIDE``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

FRAMES = ("canonical", "easy", "hard", "heatmap")
HEATMAP_STRIDE = 4


class Keypoint(NamedTuple):
    x: float
    y: float
    conf: float


def _check_frame(frame: str) -> None:
    if frame not in FRAMES:
        raise ValueError(f"unknown frame {frame!r}")


@dataclass(frozen=True)
class Pose:
    """K keypoints stored as a (K, 3) array of (x, y, conf)."""

    data: np.ndarray
    frame: str = "canonical"

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError(f"pose data must be (K, 3), got {arr.shape}")
        _check_frame(self.frame)
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_keypoints(cls, keypoints: Sequence[Keypoint], frame: str = "canonical") -> "Pose":
        return cls(np.array([tuple(k) for k in keypoints], dtype=np.float64).reshape(-1, 3), frame)

    @property
    def keypoints(self) -> list[Keypoint]:
        return [Keypoint(*map(float, row)) for row in self.data]

    @property
    def xy(self) -> np.ndarray:
        return self.data[:, :2]

    @property
    def conf(self) -> np.ndarray:
        return self.data[:, 2]

    def __len__(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class Heatmap:
    """K x Hh x Wh score maps in one frame."""

    data: np.ndarray
    frame: str = "heatmap"

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"heatmap data must be (K, H, W), got {arr.shape}")
        _check_frame(self.frame)
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    @property
    def diagonal(self) -> float:
        return heatmap_diagonal(self.dims)


def heatmap_diagonal(hm_dims: tuple[int, int]) -> float:
    """Distance between opposite corner pixel centers of an (H, W) grid."""
    h, w = hm_dims
    diag = math.sqrt((w - 1) ** 2 + (h - 1) ** 2)
    if diag <= 0:
        raise ValueError(f"degenerate heatmap dims {hm_dims}")
    return diag


# ---------------------------------------------------------------------------
# Affine transforms


@dataclass(frozen=True)
class Affine:
    """2x3 matrix mapping source pixel coordinates to target coordinates."""

    matrix: np.ndarray
    rotation: float = 0.0
    scale: float = 1.0
    center: tuple[float, float] = (0.0, 0.0)
    out_dims: tuple[int, int] | None = None
    src_frame: str | None = None
    dst_frame: str | None = None

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64).reshape(2, 3)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def homogeneous(self) -> np.ndarray:
        return np.vstack([self.matrix, [0.0, 0.0, 1.0]])

    def inverse(self) -> "Affine":
        lin = self.matrix[:, :2]
        t = self.matrix[:, 2]
        a, b, c, d = lin[0, 0], lin[0, 1], lin[1, 0], lin[1, 1]
        det = a * d - b * c
        if det == 0:
            raise ValueError("singular affine")
        inv = np.array([[d, -b], [-c, a]]) / det
        m = np.hstack([inv, (-inv @ t)[:, None]])
        return Affine(m, -self.rotation, 1.0 / self.scale if self.scale else 0.0,
                      tuple(self.apply(np.array([self.center]))[0]), None,
                      self.dst_frame, self.src_frame)

    def then(self, other: "Affine") -> "Affine":
        """Apply ``self`` first, then ``other``."""
        return compose(other, self)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]

    def rescaled(self, factor: float) -> "Affine":
        """Same transform expressed in coordinates multiplied by ``factor``."""
        m = self.matrix.copy()
        m[:, 2] *= factor
        out = None if self.out_dims is None else self.out_dims
        return Affine(m, self.rotation, self.scale,
                      (self.center[0] * factor, self.center[1] * factor), out,
                      self.src_frame, self.dst_frame)

    def with_frames(self, src: str, dst: str) -> "Affine":
        _check_frame(src)
        _check_frame(dst)
        return Affine(self.matrix, self.rotation, self.scale, self.center,
                      self.out_dims, src, dst)


def identity_affine() -> Affine:
    return Affine(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))


def make_affine(rotation: float, scale: float, center: tuple[float, float],
                out_dims: tuple[int, int] | None = None) -> Affine:
    """Rotate by ``rotation`` degrees and scale by ``scale`` about ``center``.

    The center stays fixed, so the output frame shares it with the source.
    """
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    theta = math.radians(rotation)
    c, s = math.cos(theta), math.sin(theta)
    # exact values for multiples of 90 degrees
    if rotation % 90 == 0:
        c, s = round(c), round(s)
    lin = scale * np.array([[c, -s], [s, c]])
    cx, cy = center
    t = np.array([cx, cy]) - lin @ np.array([cx, cy])
    return Affine(np.hstack([lin, t[:, None]]), float(rotation), float(scale),
                  (float(cx), float(cy)), out_dims)


def compose(second: Affine, first: Affine) -> Affine:
    """``second`` after ``first`` (mathematical composition second o first)."""
    m = (second.homogeneous @ first.homogeneous)[:2]
    return Affine(m, first.rotation + second.rotation, first.scale * second.scale,
                  first.center, second.out_dims, first.src_frame, second.dst_frame)


def invert(t: Affine) -> Affine:
    return t.inverse()


# ---------------------------------------------------------------------------
# Heatmap encoding / decoding


def render_gaussian_heatmaps(pose: Pose, sigma: float, hm_dims: tuple[int, int],
                             dtype=np.float32) -> Heatmap:
    """Render one unit-amplitude Gaussian per keypoint.

    Invisible keypoints (conf 0) and keypoints off the pixel grid yield
    all-zero channels.
    """
    data = gaussian_targets(pose.data[None], sigma, hm_dims, dtype=dtype)[0]
    return Heatmap(data, pose.frame)


def gaussian_targets(keypoints: np.ndarray, sigma: float, hm_dims: tuple[int, int],
                     dtype=np.float32) -> np.ndarray:
    """Batched rendering: (N, K, 3) keypoints -> (N, K, Hh, Wh) heatmaps."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    h, w = hm_dims
    if h <= 0 or w <= 0:
        raise ValueError(f"empty heatmap grid {hm_dims}")
    kps = np.asarray(keypoints, dtype=np.float64)
    x = kps[..., 0]
    y = kps[..., 1]
    valid = (kps[..., 2] > 0) & (x >= -0.5) & (x <= w - 0.5) & (y >= -0.5) & (y <= h - 0.5)
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    gx = np.exp(-((xs - np.where(valid, x, 0.0)[..., None]) ** 2) / (2 * sigma**2))
    gy = np.exp(-((ys - np.where(valid, y, 0.0)[..., None]) ** 2) / (2 * sigma**2))
    out = gy[..., :, None] * gx[..., None, :]
    out *= valid[..., None, None]
    return out.astype(dtype)


def decode_argmax(hm: Heatmap) -> Pose:
    """Integer argmax per channel; first row-major occurrence wins ties."""
    if hm.data.size == 0:
        raise ValueError("empty heatmap")
    return Pose(argmax_keypoints(hm.data[None])[0], "heatmap")


def argmax_keypoints(heatmaps: np.ndarray) -> np.ndarray:
    """(..., K, H, W) -> (..., K, 3) of (x, y, clamp(max, 0, 1))."""
    hms = np.asarray(heatmaps)
    h, w = hms.shape[-2:]
    flat = hms.reshape(hms.shape[:-2] + (h * w,))
    idx = np.argmax(flat, axis=-1)
    peak = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out = np.empty(idx.shape + (3,), dtype=np.float64)
    out[..., 0] = idx % w
    out[..., 1] = idx // w
    out[..., 2] = np.clip(peak, 0.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# Warping


def warp_points(pose: Pose, t: Affine) -> Pose:
    if t.src_frame is not None and t.src_frame != pose.frame:
        raise ValueError(f"pose frame {pose.frame!r} does not match transform source {t.src_frame!r}")
    data = pose.data.copy()
    vis = data[:, 2] > 0
    data[vis, :2] = t.apply(data[vis, :2])
    return Pose(data, t.dst_frame or pose.frame)


def warp_heatmap(hm: Heatmap, t: Affine, out_dims: tuple[int, int]) -> Heatmap:
    """Inverse-map with bilinear sampling; off-grid source samples count as 0."""
    if t.src_frame is not None and t.src_frame != hm.frame:
        raise ValueError(f"heatmap frame {hm.frame!r} does not match transform source {t.src_frame!r}")
    data = warp_batch(hm.data[None], t.matrix[None], out_dims, fill=0.0)[0]
    return Heatmap(data, t.dst_frame or hm.frame)


def warp_image(img: np.ndarray, t: Affine, out_dims: tuple[int, int], fill: float = 0.5) -> np.ndarray:
    """Warp a single (H, W) image; off-grid samples take ``fill``."""
    return warp_batch(np.asarray(img)[None, None], t.matrix[None], out_dims, fill=fill)[0, 0]


def _inverse_matrices(matrices: np.ndarray) -> np.ndarray:
    lin = matrices[:, :, :2]
    t = matrices[:, :, 2]
    inv = np.linalg.inv(lin)
    return np.concatenate([inv, -np.einsum("nij,nj->ni", inv, t)[:, :, None]], axis=2)


def warp_batch(arrays: np.ndarray, matrices: np.ndarray, out_dims: tuple[int, int],
               fill: float = 0.0) -> np.ndarray:
    """Bilinear warp of (N, C, H, W) arrays by per-sample (N, 2, 3) forward matrices.

    Each output pixel is sampled at the inverse-mapped source location. A
    bilinear neighbour outside the source grid contributes ``fill``.
    """
    arrays = np.asarray(arrays)
    ho, wo = out_dims
    if ho <= 0 or wo <= 0:
        raise ValueError(f"empty output grid {out_dims}")
    n, c, h, w = arrays.shape
    work = np.float32 if arrays.dtype == np.float32 else np.float64
    inv = _inverse_matrices(np.asarray(matrices, dtype=np.float64).reshape(n, 2, 3)).astype(work)
    yy, xx = np.mgrid[0:ho, 0:wo].astype(work)
    grid = np.stack([xx.ravel(), yy.ravel()])  # (2, P)
    src = inv[:, :, :2] @ grid + inv[:, :, 2:]  # (N, 2, P)
    x0 = np.floor(src[:, 0])
    y0 = np.floor(src[:, 1])
    fx = src[:, 0] - x0
    fy = src[:, 1] - y0
    # a one-pixel border of `fill` absorbs every out-of-grid neighbour
    wp = w + 2
    padded = np.full((n, c, h + 2, wp), fill, dtype=work)
    padded[:, :, 1:-1, 1:-1] = arrays
    flat = padded.reshape(n, c, -1)
    # indices into the padded grid; -1 and w (h) land on the fill border
    xa = np.clip(x0, -1, w).astype(np.intp) + 1
    ya = np.clip(y0, -1, h).astype(np.intp) + 1
    xb = np.clip(x0 + 1, -1, w).astype(np.intp) + 1
    yb = np.clip(y0 + 1, -1, h).astype(np.intp) + 1
    ya *= wp
    yb *= wp
    gx = 1 - fx
    gy = 1 - fy
    out = np.empty((n, c, ho * wo), dtype=work)
    for i in range(n):
        f = flat[i]
        out[i] = f[:, ya[i] + xa[i]] * (gx[i] * gy[i])
        out[i] += f[:, ya[i] + xb[i]] * (fx[i] * gy[i])
        out[i] += f[:, yb[i] + xa[i]] * (gx[i] * fy[i])
        out[i] += f[:, yb[i] + xb[i]] * (fx[i] * fy[i])
    return out.reshape(n, c, ho, wo).astype(arrays.dtype, copy=False)


def image_to_heatmap_affine(t: Affine, stride: int = HEATMAP_STRIDE) -> Affine:
    """Express an image-frame affine in heatmap coordinates."""
    return t.rescaled(1.0 / stride)
