"""PCK evaluation, confidence / inconsistency statistics and the PCM noise oracle."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .estimator import EstimatorParams, predict
from .geometry import HEATMAP_STRIDE, Pose, argmax_keypoints, gaussian_targets, heatmap_diagonal
from .pcm import PAIR_INDEX, pair_inconsistency, pcm_correct_batch

log = logging.getLogger(__name__)


def pck(pred: Pose, gt: Pose, alpha: float, bbox_diag: float) -> tuple[np.ndarray, float]:
    """Per-keypoint correctness and mean over visible ground-truth keypoints.

    A keypoint is correct when its distance to ground truth is at most
    ``alpha * bbox_diag``. Invisible ground truth is never counted correct
    and is excluded from the mean.
    """
    if pred.frame != gt.frame:
        raise ValueError(f"frame mismatch: {pred.frame} vs {gt.frame}")
    if not bbox_diag > 0:
        raise ValueError(f"bbox_diag must be positive, got {bbox_diag}")
    correct, visible = _pck_arrays(pred.xy[None], gt.data[None], alpha, np.array([bbox_diag]))
    mean = float(correct[0][visible[0]].mean()) if visible.any() else float("nan")
    return correct[0], mean


def _pck_arrays(pred_xy, gt, alpha, diags):
    d = np.linalg.norm(pred_xy - gt[..., :2], axis=-1)
    visible = gt[..., 2] > 0
    correct = (d <= alpha * diags[:, None]) & visible
    return correct, visible


def pck_batch(pred_xy: np.ndarray, gt: np.ndarray, alpha: float, diags: np.ndarray) -> float:
    """Pooled PCK over all visible keypoints of a batch (image frame)."""
    if np.any(diags <= 0):
        raise ValueError("bbox diagonals must be positive")
    correct, visible = _pck_arrays(pred_xy, gt, alpha, diags)
    n = visible.sum()
    return float(correct.sum() / n) if n else float("nan")


def predict_keypoints(params: EstimatorParams, images: np.ndarray) -> np.ndarray:
    """Decoded image-frame keypoints (N, K, 3) for canonical images."""
    kps = argmax_keypoints(predict(params, images))
    kps[..., :2] *= HEATMAP_STRIDE
    return kps


def evaluate_pck(params: EstimatorParams, images: np.ndarray, keypoints: np.ndarray,
                 diags: np.ndarray, alpha: float = 0.2) -> float:
    return pck_batch(predict_keypoints(params, images)[..., :2], keypoints, alpha, diags)


# ---------------------------------------------------------------------------
# Rank statistics


def spearman(a, b) -> float:
    """Spearman correlation with midranks for ties."""
    ra = rankdata(a, method="average")
    rb = rankdata(b, method="average")
    ra = ra - ra.mean()
    rb = rb - rb.mean()
    denom = np.sqrt(np.sum(ra * ra) * np.sum(rb * rb))
    if denom == 0:
        return float("nan")
    return float(np.sum(ra * rb) / denom)


def binned_means(x, y, bins: int = 10) -> dict:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) == 0:
        return {"edges": [], "means": [], "counts": []}
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        hi = lo + 1e-12
    edges = np.linspace(lo, hi, bins + 1)
    which = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, bins - 1)
    counts = np.bincount(which, minlength=bins)
    sums = np.bincount(which, weights=y, minlength=bins)
    means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return {"edges": edges.tolist(), "means": [None if np.isnan(m) else float(m) for m in means],
            "counts": counts.tolist()}


# ---------------------------------------------------------------------------
# PI / confidence analysis


@dataclass(frozen=True)
class AnalysisRow:
    sample_id: int
    keypoint: int
    confidence: float
    pi: float
    normalized_error: float


def analyze_pi(params_a: EstimatorParams, params_b: EstimatorParams, images: np.ndarray,
               gt_keypoints: np.ndarray, sample_ids, tau: float = 0.1):
    """Relate teacher confidence and A/B inconsistency to pseudo-label error.

    ``gt_keypoints`` are image-frame oracle labels (hidden ground truth for
    unlabeled data or test labels). Rows are emitted for keypoints where
    both teachers reach ``tau`` and the ground truth is visible. Confidence
    and error describe network A's pseudo label.
    """
    return analyze_heatmaps(predict(params_a, images), predict(params_b, images), gt_keypoints,
                            sample_ids, tau)


def analyze_heatmaps(hm_a: np.ndarray, hm_b: np.ndarray, gt_keypoints: np.ndarray, sample_ids,
                     tau: float = 0.1):
    """Rows and summary from two teachers' (N, K, H, W) heatmaps."""
    dims = hm_a.shape[-2:]
    diag = heatmap_diagonal(dims)
    ka = argmax_keypoints(hm_a)
    kb = argmax_keypoints(hm_b)
    gt = np.asarray(gt_keypoints, dtype=np.float64)
    keep = (ka[..., 2] >= tau) & (kb[..., 2] >= tau) & (ka[..., 2] > 0) & (kb[..., 2] > 0) & (gt[..., 2] > 0)
    pi = pair_inconsistency(ka[..., :2], kb[..., :2], dims)
    err = np.linalg.norm(ka[..., :2] - gt[..., :2] / HEATMAP_STRIDE, axis=-1) / diag
    rows = []
    ids = np.asarray(sample_ids)
    for n, k in zip(*np.nonzero(keep)):
        rows.append(AnalysisRow(int(ids[n]), int(k), float(ka[n, k, 2]), float(pi[n, k]), float(err[n, k])))
    return rows, summarize_rows(rows)


def summarize_rows(rows: list[AnalysisRow], bins: int = 10) -> dict:
    conf = np.array([r.confidence for r in rows])
    pi = np.array([r.pi for r in rows])
    err = np.array([r.normalized_error for r in rows])
    low = len(rows) < 100
    if low:
        log.warning("only %d analysis rows; correlations are low-confidence", len(rows))
    return {
        "n_rows": len(rows),
        "low_confidence": low,
        "spearman_conf_vs_neg_error": spearman(conf, -err) if len(rows) > 1 else float("nan"),
        "spearman_pi_vs_error": spearman(pi, err) if len(rows) > 1 else float("nan"),
        "mean_error": float(err.mean()) if len(rows) else float("nan"),
        "confidence_bins": binned_means(conf, err, bins),
        "pi_bins": binned_means(pi, err, bins),
    }


def write_analysis(rows: list[AnalysisRow], summary: dict, csv_path, json_path=None) -> None:
    csv_path = Path(csv_path)
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "keypoint", "confidence", "pi", "normalized_error"])
        for r in rows:
            w.writerow([r.sample_id, r.keypoint, repr(r.confidence), repr(r.pi), repr(r.normalized_error)])
    json_path = Path(json_path) if json_path else csv_path.with_name("summary.json")
    with open(json_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, indent=1, allow_nan=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Monte-Carlo oracle for the pair-selection rule


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = 2.0
    outlier_prob: float = 0.1
    hm_dims: tuple[int, int] = (16, 12)
    render_sigma: float = 1.0
    tau: float = 0.1


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0


def pcm_noise_oracle(noise: NoiseModel = NoiseModel(), trials: int = 10000, seed: int = 0,
                     chunk: int = 2000) -> dict:
    """Compare min-PI pair fusion against random candidate / random pair choices.

    Each trial draws an integer ground-truth location, four candidates
    (ground truth plus Gaussian noise, each replaced by a uniform outlier
    with ``outlier_prob``), renders them as heatmaps and measures the
    argmax error of three strategies in heatmap pixels.
    """
    if trials < 1000:
        raise ValueError("pcm_noise_oracle needs at least 1000 trials")
    rng = np.random.default_rng(seed)
    h, w = noise.hm_dims
    ident = np.tile(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), (chunk, 1, 1))
    errs = {"selected": [], "single": [], "random_pair": []}
    outliers_in_pair = []
    outliers_random_pair = []
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        gt = np.column_stack([rng.integers(0, w, n), rng.integers(0, h, n)]).astype(np.float64)
        cand = gt[:, None, :] + rng.normal(0.0, noise.sigma, size=(n, 4, 2))
        is_out = rng.random((n, 4)) < noise.outlier_prob
        uniform = np.stack([rng.uniform(0, w - 1, (n, 4)), rng.uniform(0, h - 1, (n, 4))], axis=-1)
        cand = np.where(is_out[..., None], uniform, cand)
        cand[..., 0] = np.clip(cand[..., 0], 0, w - 1)
        cand[..., 1] = np.clip(cand[..., 1], 0, h - 1)
        kps = np.concatenate([cand, np.ones((n, 4, 1))], axis=-1).reshape(n, 4, 1, 3)
        hms = gaussian_targets(kps.reshape(n * 4, 1, 3), noise.render_sigma, noise.hm_dims,
                               dtype=np.float64).reshape(n, 4, 1, h, w)
        fused, mask, choice, _ = pcm_correct_batch(hms, np.ones((n, 4), bool), ident[:n],
                                                   noise.hm_dims, noise.tau)
        sel = argmax_keypoints(fused)[:, 0, :2]
        errs["selected"].append(np.linalg.norm(sel - gt, axis=-1))

        pick = rng.integers(0, 4, n)
        single = argmax_keypoints(hms[np.arange(n), pick])[:, 0, :2]
        errs["single"].append(np.linalg.norm(single - gt, axis=-1))

        pair = rng.integers(0, len(PAIR_INDEX), n)
        a, b = PAIR_INDEX[pair, 0], PAIR_INDEX[pair, 1]
        avg = 0.5 * (hms[np.arange(n), a] + hms[np.arange(n), b])
        rp = argmax_keypoints(avg)[:, 0, :2]
        errs["random_pair"].append(np.linalg.norm(rp - gt, axis=-1))

        c = np.where(choice[:, 0] < 0, 0, choice[:, 0])
        outliers_in_pair.append(is_out[np.arange(n), PAIR_INDEX[c, 0]] | is_out[np.arange(n), PAIR_INDEX[c, 1]])
        outliers_random_pair.append(is_out[np.arange(n), a] | is_out[np.arange(n), b])
        done += n

    e = {k: np.concatenate(v) for k, v in errs.items()}
    report = {"trials": trials, "noise": asdict(noise), "seed": seed}
    for k, v in e.items():
        report[f"{k}_mean"], report[f"{k}_se"] = _mean_se(v)
    # paired differences carry the Monte-Carlo uncertainty of each comparison
    report["gain_vs_single_mean"], report["gain_vs_single_se"] = _mean_se(0.9 * e["single"] - e["selected"])
    report["gain_vs_pair_mean"], report["gain_vs_pair_se"] = _mean_se(e["random_pair"] - e["selected"])
    report["outlier_in_selected_pair"] = float(np.concatenate(outliers_in_pair).mean())
    report["outlier_in_random_pair"] = float(np.concatenate(outliers_random_pair).mean())
    return report
