"""Position-inconsistency pseudo-label correction.

Candidates are indexed in a fixed order: A_last, A_cur, B_last, B_cur.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Affine, Heatmap, Keypoint, Pose, argmax_keypoints, decode_argmax, \
    heatmap_diagonal, warp_batch

CANDIDATES = ("A_last", "A_cur", "B_last", "B_cur")
# cross-model pairs in tie-break order: more current-epoch members first,
# then lexicographic on the candidate names
PAIRS = (("A_cur", "B_cur"), ("A_cur", "B_last"), ("A_last", "B_cur"), ("A_last", "B_last"))
PAIR_INDEX = np.array([[CANDIDATES.index(a), CANDIDATES.index(b)] for a, b in PAIRS])
NO_PAIR = -1


@dataclass(frozen=True)
class PLCandidate:
    source_model: str
    source_epoch: str
    heatmap: Heatmap

    def __post_init__(self):
        if self.source_model not in ("A", "B") or self.source_epoch not in ("last", "current"):
            raise ValueError(f"bad candidate identity {self.source_model}/{self.source_epoch}")

    @property
    def name(self) -> str:
        return f"{self.source_model}_{'cur' if self.source_epoch == 'current' else 'last'}"

    @property
    def decoded(self) -> Pose:
        return decode_argmax(self.heatmap)


@dataclass
class PCMResult:
    fused: Heatmap
    keypoint_mask: np.ndarray  # (K,) 0/1
    pair: list[tuple[str, str] | None]
    pi: np.ndarray  # (K,), nan where no pair survived


def position_inconsistency(pA: Keypoint, pB: Keypoint, hm_dims: tuple[int, int]) -> float:
    """Argmax distance normalized by the heatmap diagonal."""
    if pA.conf <= 0 or pB.conf <= 0:
        raise ValueError("position inconsistency needs two scored keypoints")
    dx = pA.x - pB.x
    dy = pA.y - pB.y
    return math.sqrt(dx * dx + dy * dy) / heatmap_diagonal(hm_dims)


def pair_inconsistency(xy_a: np.ndarray, xy_b: np.ndarray, hm_dims: tuple[int, int]) -> np.ndarray:
    """Vectorized PI for coordinate arrays (..., 2)."""
    d = xy_a - xy_b
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1]) / heatmap_diagonal(hm_dims)


def select_pairs(decoded: np.ndarray, available: np.ndarray, hm_dims: tuple[int, int],
                 tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Choose the minimal-PI cross-model pair per keypoint.

    Args:
        decoded: (N, 4, K, 3) argmax keypoints of the four candidates.
        available: (N, 4) bool, False for missing (e.g. epoch-0) candidates.

    Returns:
        pair index into ``PAIRS`` (N, K), ``NO_PAIR`` where nothing survives,
        and the chosen PI (N, K), nan where nothing survives.
    """
    keep = (decoded[..., 2] >= tau) & available[:, :, None]
    keep &= decoded[..., 2] > 0
    a = PAIR_INDEX[:, 0]
    b = PAIR_INDEX[:, 1]
    pis = pair_inconsistency(decoded[:, a, :, :2], decoded[:, b, :, :2], hm_dims)  # (N, P, K)
    valid = keep[:, a] & keep[:, b]
    pis = np.where(valid, pis, np.inf)
    choice = np.argmin(pis, axis=1)  # first minimum keeps the tie-break order
    chosen_pi = np.take_along_axis(pis, choice[:, None], axis=1)[:, 0]
    none = ~valid.any(axis=1)
    choice = np.where(none, NO_PAIR, choice)
    chosen_pi = np.where(none, np.nan, chosen_pi)
    return choice, chosen_pi


def pcm_correct_batch(candidates: np.ndarray, available: np.ndarray, hard: np.ndarray,
                      hm_dims: tuple[int, int], tau: float):
    """Batched correction.

    Args:
        candidates: (N, 4, K, H, W) canonical-frame heatmaps (missing ones may hold anything).
        available: (N, 4) or (4,) bool.
        hard: (N, 2, 3) canonical -> hard heatmap-frame matrices.

    Returns:
        fused (N, K, Ho, Wo), mask (N, K), pair index (N, K), PI (N, K).
    """
    candidates = np.asarray(candidates)
    n, c, k = candidates.shape[:3]
    available = np.broadcast_to(np.asarray(available, dtype=bool), (n, c))
    if not (available[:, 1].all() and available[:, 3].all()):
        raise ValueError("A_cur and B_cur are required")
    decoded = argmax_keypoints(candidates)
    choice, pi = select_pairs(decoded, available, hm_dims, tau)
    mask = (choice != NO_PAIR).astype(np.float32)
    safe = np.where(choice == NO_PAIR, 0, choice)
    first = PAIR_INDEX[safe, 0]  # (N, K)
    second = PAIR_INDEX[safe, 1]
    rows = np.arange(n)[:, None]
    chans = np.arange(k)[None, :]
    pick1 = candidates[rows, first, chans]  # (N, K, H, W)
    pick2 = candidates[rows, second, chans]
    h, w = candidates.shape[-2:]
    stacked = np.concatenate([pick1, pick2], axis=1)
    warped = warp_batch(stacked, hard, hm_dims, fill=0.0)
    fused = 0.5 * (warped[:, :k] + warped[:, k:])
    fused *= mask[:, :, None, None]
    return fused.astype(candidates.dtype, copy=False), mask, choice, pi


def pcm_correct(candidates: dict[str, Heatmap | None], hard_t: Affine, hm_dims: tuple[int, int],
                conf_threshold: float = 0.1) -> PCMResult:
    """Single-sample correction; ``candidates`` maps candidate names to heatmaps."""
    for req in ("A_cur", "B_cur"):
        if candidates.get(req) is None:
            raise ValueError(f"missing required candidate {req}")
    ref = candidates["A_cur"].data
    stack = np.zeros((1, 4) + ref.shape, dtype=ref.dtype)
    avail = np.zeros((1, 4), dtype=bool)
    for i, name in enumerate(CANDIDATES):
        hm = candidates.get(name)
        if hm is not None:
            stack[0, i] = hm.data
            avail[0, i] = True
    fused, mask, choice, pi = pcm_correct_batch(stack, avail, hard_t.matrix[None], hm_dims,
                                                conf_threshold)
    pairs = [None if c == NO_PAIR else PAIRS[c] for c in choice[0]]
    return PCMResult(Heatmap(fused[0], "hard"), mask[0], pairs, pi[0])


class PLCache:
    """Last-epoch canonical pseudo labels of networks A and B, double-buffered.

    Writes during an epoch go to a staging buffer; ``promote`` makes them
    visible for the next epoch.
    """

    MODELS = ("A", "B")

    def __init__(self, sample_ids, shape: tuple[int, int, int], dtype=np.float32):
        self.rows = {int(s): i for i, s in enumerate(sample_ids)}
        n = len(self.rows)
        self._current = np.zeros((n, 2) + tuple(shape), dtype=dtype)
        self._has = np.zeros((n, 2), dtype=bool)
        self._staging = np.zeros_like(self._current)
        self._staged = np.zeros_like(self._has)

    def _row(self, sample_id) -> int:
        try:
            return self.rows[int(sample_id)]
        except KeyError:
            raise KeyError(f"sample {sample_id} is not an unlabeled id") from None

    def update(self, sample_id, model: str, canonical_hm: np.ndarray) -> None:
        m = self.MODELS.index(model)
        r = self._row(sample_id)
        self._staging[r, m] = canonical_hm
        self._staged[r, m] = True

    def update_many(self, sample_ids, model: str, heatmaps: np.ndarray) -> None:
        m = self.MODELS.index(model)
        rows = np.array([self._row(s) for s in sample_ids])
        self._staging[rows, m] = heatmaps
        self._staged[rows, m] = True

    def get(self, sample_id, model: str) -> np.ndarray | None:
        r = self._row(sample_id)
        m = self.MODELS.index(model)
        return self._current[r, m] if self._has[r, m] else None

    def get_many(self, sample_ids) -> tuple[np.ndarray, np.ndarray]:
        """(N, 2, K, H, W) heatmaps and (N, 2) availability."""
        rows = np.array([self._row(s) for s in sample_ids])
        return self._current[rows], self._has[rows]

    def promote(self) -> None:
        self._current[self._staged] = self._staging[self._staged]
        self._has |= self._staged
        self._staged[:] = False

    def __len__(self) -> int:
        return int(self._has.sum())


def update_pl_cache(cache: PLCache, sample_id, model: str, canonical_hm) -> None:
    data = canonical_hm.data if isinstance(canonical_hm, Heatmap) else canonical_hm
    cache.update(sample_id, model, data)
