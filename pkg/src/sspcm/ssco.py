"""Keypoint-aware cut-occlude: paste a donor limb patch onto a recipient keypoint."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Pose


@dataclass(frozen=True)
class SSCOConfig:
    n_patches: int = 2
    patch_side_range: tuple[float, float] = (0.15, 0.30)
    min_conf: float = 0.1

    def __post_init__(self):
        lo, hi = self.patch_side_range
        if self.n_patches < 0:
            raise ValueError("n_patches must be >= 0")
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"patch_side_range must lie in (0, 1], got {self.patch_side_range}")


def _odd_side(rng: np.random.Generator, cfg: SSCOConfig, dims: tuple[int, int]) -> int:
    s = rng.uniform(*cfg.patch_side_range) * min(dims)
    # nearest odd integer
    return 2 * int(np.floor(s / 2)) + 1


def paste_rect(recipient: np.ndarray, donor: np.ndarray, src_center, dst_center, side: int):
    """Copy a ``side`` x ``side`` patch; returns the recipient rectangle written (or None)."""
    h, w = recipient.shape
    half = side // 2
    sx, sy = int(round(src_center[0])), int(round(src_center[1]))
    dx, dy = int(round(dst_center[0])), int(round(dst_center[1]))
    # offsets of the patch relative to its center, clipped on both images
    lo_x = max(-half, -sx, -dx)
    hi_x = min(half, w - 1 - sx, w - 1 - dx)
    lo_y = max(-half, -sy, -dy)
    hi_y = min(half, h - 1 - sy, h - 1 - dy)
    if lo_x > hi_x or lo_y > hi_y:
        return None
    recipient[dy + lo_y:dy + hi_y + 1, dx + lo_x:dx + hi_x + 1] = \
        donor[sy + lo_y:sy + hi_y + 1, sx + lo_x:sx + hi_x + 1]
    return (dx + lo_x, dy + lo_y, dx + hi_x + 1, dy + hi_y + 1)


def ssco_apply(recipient: np.ndarray, recipient_kps: Pose | np.ndarray, donor: np.ndarray,
               donor_kps: Pose | np.ndarray, cfg: SSCOConfig, rng: np.random.Generator,
               return_rects: bool = False):
    """Occlude ``recipient`` with ``cfg.n_patches`` donor patches.

    Patches are centered on confident donor pseudo keypoints and pasted on
    confident recipient pseudo keypoints (both canonical image frame). An
    iteration without a confident keypoint on either side is skipped.
    """
    if recipient.shape != donor.shape:
        raise ValueError(f"image shapes differ: {recipient.shape} vs {donor.shape}")
    rk = recipient_kps.data if isinstance(recipient_kps, Pose) else np.asarray(recipient_kps)
    dk = donor_kps.data if isinstance(donor_kps, Pose) else np.asarray(donor_kps)
    out = np.array(recipient, copy=True)
    rects = []
    r_ok = np.flatnonzero((rk[:, 2] >= cfg.min_conf) & (rk[:, 2] > 0))
    d_ok = np.flatnonzero((dk[:, 2] >= cfg.min_conf) & (dk[:, 2] > 0))
    for _ in range(cfg.n_patches):
        if len(r_ok) == 0 or len(d_ok) == 0:
            continue
        src = dk[d_ok[rng.integers(len(d_ok))], :2]
        dst = rk[r_ok[rng.integers(len(r_ok))], :2]
        side = _odd_side(rng, cfg, out.shape)
        rect = paste_rect(out, donor, src, dst, side)
        if rect is not None:
            rects.append(rect)
    return (out, rects) if return_rects else out
