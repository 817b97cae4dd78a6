"""Four-step interactive training (supervised, cross-teaching, PCM-guided student).

Methods:
    supervised  network C on labeled data only
    dual        networks A and B, labeled step plus mutual cross-teaching
    sspcm       all four steps; network C learns from PCM-corrected labels
"""
from __future__ import annotations

import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import evalanalysis
from .estimator import (AdamState, ArchConfig, EstimatorParams, LRSchedule, adam_step, backward,
                        forward, init_estimator, lr_at, mse_masked_loss, predict, save_params)
from .geometry import HEATMAP_STRIDE, argmax_keypoints, gaussian_targets, warp_batch
from .pcm import PLCache, pcm_correct_batch, PAIR_INDEX, NO_PAIR
from .ssco import SSCOConfig, ssco_apply
from .synthdata import Dataset, Split

log = logging.getLogger(__name__)

METHODS = ("supervised", "dual", "sspcm")
IMAGE_FILL = 0.5

# stream tags for np.random.default_rng([seed, tag, ...])
_INIT, _SPLIT, _LABELED, _LAUG, _CROSS, _STEP4, _PERM = range(7)


class TrainingError(RuntimeError):
    pass


class TeacherMutation(TrainingError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    method: str = "sspcm"
    beta: float = 1.0
    tau: float = 0.1
    sigma: float = 1.0
    easy_rotation: float = 30.0
    easy_scale: tuple[float, float] = (0.75, 1.25)
    hard_rotation: float = 60.0
    hard_scale: tuple[float, float] = (0.75, 1.25)
    ssco_patches: int = 2
    ssco_side: tuple[float, float] = (0.15, 0.30)
    mask_steps: str = "all"
    epochs: int = 60
    batch_size: int = 32
    base_lr: float = 1e-3
    lr_decay_epochs: tuple[int, ...] = (40, 50)
    lr_decay_factor: float = 0.1
    seed: int = 0
    teacher_width: float = 1.0
    val_fraction: float = 0.2
    eval_alpha: float = 0.2
    snapshot_every: int = 10
    channels: tuple[int, ...] = (8, 16, 16, 16)
    strides: tuple[int, ...] = (2, 2, 1, 1)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.mask_steps not in ("all", "step4"):
            raise ValueError("mask_steps must be 'all' or 'step4'")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")
        if self.teacher_width <= 0:
            raise ValueError("teacher_width must be positive")
        LRSchedule(self.base_lr, self.lr_decay_epochs, self.lr_decay_factor)
        self.ssco  # validates ranges

    @property
    def ssco(self) -> SSCOConfig:
        return SSCOConfig(self.ssco_patches, self.ssco_side, self.tau)

    @property
    def schedule(self) -> LRSchedule:
        return LRSchedule(self.base_lr, self.lr_decay_epochs, self.lr_decay_factor)

    @property
    def nets(self) -> tuple[str, ...]:
        return {"supervised": ("C",), "dual": ("A", "B"), "sspcm": ("A", "B", "C")}[self.method]

    @property
    def reported_net(self) -> str:
        return "A" if self.method == "dual" else "C"

    def replace(self, **kw) -> "TrainConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return TrainConfig(**d)


@dataclass
class Net:
    name: str
    params: EstimatorParams
    opt: AdamState

    def update(self, grads, lr: float) -> None:
        adam_step(self.opt, self.params, grads, lr)


@dataclass
class RunReport:
    rows: list[dict] = field(default_factory=list)
    final_test_pck: dict[str, float] = field(default_factory=dict)
    batch_log: list[dict] = field(default_factory=list)
    counters: Counter = field(default_factory=Counter)
    wall_clock: float = 0.0
    method: str = ""
    reported_net: str = "C"

    @property
    def test_pck(self) -> float:
        return self.final_test_pck[self.reported_net]


CSV_COLUMNS = ("epoch", "lr", "l_sup", "l_unsup1", "l_unsup2", "l_unsup3", "pck_a", "pck_b", "pck_c")


def format_metrics_row(row: dict) -> str:
    vals = [str(row["epoch"])] + ["%.6f" % row[c] for c in CSV_COLUMNS[1:]]
    return ",".join(vals) + "\n"


# ---------------------------------------------------------------------------
# Augmentation helpers (image frame)


def sample_affines(rng: np.random.Generator, n: int, rotation: float, scale: tuple[float, float],
                   image_dims: tuple[int, int]) -> np.ndarray:
    """(n, 2, 3) rotate/scale matrices about the image center."""
    h, w = image_dims
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    rot = np.radians(rng.uniform(-rotation, rotation, n))
    sc = rng.uniform(scale[0], scale[1], n)
    c = np.cos(rot) * sc
    s = np.sin(rot) * sc
    m = np.empty((n, 2, 3))
    m[:, 0, 0], m[:, 0, 1] = c, -s
    m[:, 1, 0], m[:, 1, 1] = s, c
    m[:, 0, 2] = cx - (c * cx - s * cy)
    m[:, 1, 2] = cy - (s * cx + c * cy)
    return m


def invert_affines(m: np.ndarray) -> np.ndarray:
    lin = np.linalg.inv(m[:, :, :2])
    return np.concatenate([lin, -np.einsum("nij,nj->ni", lin, m[:, :, 2])[:, :, None]], axis=2)


def compose_affines(second: np.ndarray, first: np.ndarray) -> np.ndarray:
    lin = second[:, :, :2] @ first[:, :, :2]
    t = np.einsum("nij,nj->ni", second[:, :, :2], first[:, :, 2]) + second[:, :, 2]
    return np.concatenate([lin, t[:, :, None]], axis=2)


def to_heatmap_frame(m: np.ndarray) -> np.ndarray:
    out = m.copy()
    out[:, :, 2] /= HEATMAP_STRIDE
    return out


def warp_keypoints(kps: np.ndarray, m: np.ndarray) -> np.ndarray:
    out = kps.copy()
    out[..., :2] = np.einsum("nij,nkj->nki", m[:, :, :2], kps[..., :2]) + m[:, None, :, 2]
    return out


def warp_images(images: np.ndarray, m: np.ndarray) -> np.ndarray:
    return warp_batch(images[:, None], m, images.shape[1:], fill=IMAGE_FILL)[:, 0]


@dataclass
class PseudoLabels:
    """Teacher output on easy-augmented inputs."""

    heatmaps: np.ndarray  # (N, K, Hh, Wh) easy frame
    easy: np.ndarray  # (N, 2, 3) image-frame easy affines
    conf: np.ndarray  # (N, K)

    def canonical_heatmaps(self) -> np.ndarray:
        inv = to_heatmap_frame(invert_affines(self.easy))
        return warp_batch(self.heatmaps, inv, self.heatmaps.shape[-2:], fill=0.0)

    def canonical_keypoints(self) -> np.ndarray:
        """Decoded peaks mapped back to canonical image coordinates (N, K, 3)."""
        kps = argmax_keypoints(self.heatmaps)
        kps[..., :2] *= HEATMAP_STRIDE
        return warp_keypoints(kps, invert_affines(self.easy))

    def in_frame(self, hard: np.ndarray) -> np.ndarray:
        """Heatmaps mapped from the easy frame into the hard frame."""
        m = to_heatmap_frame(compose_affines(hard, invert_affines(self.easy)))
        return warp_batch(self.heatmaps, m, self.heatmaps.shape[-2:], fill=0.0)


def teacher_pass(teacher: Net, images: np.ndarray, easy: np.ndarray) -> PseudoLabels:
    """Frozen forward of a teacher on easy-augmented inputs (no tape)."""
    before = teacher.params.checksum()
    hms = predict(teacher.params, warp_images(images, easy))
    if teacher.params.checksum() != before:
        raise TeacherMutation(f"teacher {teacher.name} changed during a frozen pass")
    return PseudoLabels(hms, easy, argmax_keypoints(hms)[..., 2])


def occlude_batch(images: np.ndarray, kps: np.ndarray, cfg: SSCOConfig,
                  rng: np.random.Generator) -> np.ndarray:
    """SSCO for a batch; the donor of sample i is sample i+1 (cyclic)."""
    if cfg.n_patches == 0:
        return images
    n = len(images)
    out = np.empty_like(images)
    for i in range(n):
        j = (i + 1) % n
        out[i] = ssco_apply(images[i], kps[i], images[j], kps[j], cfg, rng)
    return out


# ---------------------------------------------------------------------------
# Steps


def train_step1_supervised(nets: list[Net], images: np.ndarray, keypoints: np.ndarray,
                           easy: np.ndarray, cfg: TrainConfig, lr: float,
                           counters: Counter | None = None) -> tuple[float, dict[str, float]]:
    """All nets see the same easy-augmented labeled batch; returns (L_sup, per-net)."""
    if keypoints is None or np.any(np.isnan(keypoints)):
        raise ValueError("step 1 needs labeled samples")
    x = warp_images(images, easy)
    kps = warp_keypoints(keypoints, easy)
    kps[..., :2] /= HEATMAP_STRIDE
    hm_dims = (images.shape[1] // HEATMAP_STRIDE, images.shape[2] // HEATMAP_STRIDE)
    target = gaussian_targets(kps, cfg.sigma, hm_dims)
    mask = (keypoints[..., 2] > 0).astype(np.float32)
    per_net = {}
    for net in nets:
        pred, tape = forward(net.params, x)
        if counters is not None:
            counters[f"forward_{net.name}"] += 1
        per_net[net.name] = mse_masked_loss(pred, target, mask, tape=tape)
        net.update(backward(tape), lr)
    return float(sum(per_net.values())), per_net


def train_step_cross(pseudo: PseudoLabels, student: Net, images: np.ndarray, hard: np.ndarray,
                     cfg: TrainConfig, lr: float, ssco_rng: np.random.Generator,
                     counters: Counter | None = None, use_mask: bool = True) -> float:
    """Student on hard occluded views learns the teacher's easy-view labels.

    ``pseudo`` comes from ``teacher_pass`` on the teacher; the teacher is
    not touched here.
    """
    target = pseudo.in_frame(hard)
    if use_mask:
        mask = (pseudo.conf >= cfg.tau).astype(np.float32)
    else:
        mask = np.ones(pseudo.conf.shape, np.float32)
    occluded = occlude_batch(images, pseudo.canonical_keypoints(), cfg.ssco, ssco_rng)
    pred, tape = forward(student.params, warp_images(occluded, hard))
    if counters is not None:
        counters[f"forward_{student.name}"] += 1
    loss = mse_masked_loss(pred, target, mask, tape=tape)
    if cfg.beta > 0 and mask.any():
        student.update(backward(tape, scale=cfg.beta), lr)
    return loss


def train_step4_pcm(student: Net, cand_a: np.ndarray, cand_b: np.ndarray, cache: PLCache | None,
                    sample_ids: np.ndarray, images: np.ndarray, hard: np.ndarray,
                    cfg: TrainConfig, lr: float, ssco_rng: np.random.Generator,
                    counters: Counter | None = None) -> tuple[float, dict]:
    """PCM-corrected labels supervise network C.

    ``cand_a`` / ``cand_b`` are the current canonical-frame pseudo labels of
    A and B; last-epoch labels come from ``cache``. The cache staging area
    receives the current labels.
    """
    n = len(images)
    k, hh, ww = cand_a.shape[1:]
    stack = np.zeros((n, 4, k, hh, ww), dtype=cand_a.dtype)
    avail = np.zeros((n, 4), dtype=bool)
    stack[:, 1] = cand_a
    stack[:, 3] = cand_b
    avail[:, [1, 3]] = True
    if cache is not None:
        last, has = cache.get_many(sample_ids)
        stack[:, 0] = last[:, 0]
        stack[:, 2] = last[:, 1]
        avail[:, 0] = has[:, 0]
        avail[:, 2] = has[:, 1]
    hard_hm = to_heatmap_frame(hard)
    fused, mask, choice, pi = pcm_correct_batch(stack, avail, hard_hm, (hh, ww), cfg.tau)
    if counters is not None:
        counters["pcm_correct"] += 1

    # occlusion centers: midpoint of the chosen pair's canonical peaks
    dec = argmax_keypoints(stack)
    safe = np.where(choice == NO_PAIR, 0, choice)
    rows = np.arange(n)[:, None]
    chans = np.arange(k)[None, :]
    p1 = dec[rows, PAIR_INDEX[safe, 0], chans]
    p2 = dec[rows, PAIR_INDEX[safe, 1], chans]
    centers = np.empty((n, k, 3))
    centers[..., :2] = 0.5 * (p1[..., :2] + p2[..., :2]) * HEATMAP_STRIDE
    centers[..., 2] = np.where(mask > 0, np.minimum(p1[..., 2], p2[..., 2]), 0.0)
    occluded = occlude_batch(images, centers, cfg.ssco, ssco_rng)

    pred, tape = forward(student.params, warp_images(occluded, hard))
    if counters is not None:
        counters[f"forward_{student.name}"] += 1
    loss = mse_masked_loss(pred, fused, mask, tape=tape)
    if cfg.beta > 0 and mask.any():
        student.update(backward(tape, scale=cfg.beta), lr)
    if cache is not None:
        cache.update_many(sample_ids, "A", cand_a)
        cache.update_many(sample_ids, "B", cand_b)
    return loss, {"mask": mask, "choice": choice, "pi": pi}


# ---------------------------------------------------------------------------
# Run


def split_labeled(labeled: Split, val_fraction: float, seed: int) -> tuple[Split, Split]:
    n = len(labeled)
    n_val = int(round(val_fraction * n))
    perm = np.random.default_rng([seed, _SPLIT]).permutation(n)
    val = np.sort(perm[:n_val])
    train = np.sort(perm[n_val:])
    return labeled.subset(train, "train"), labeled.subset(val, "val")


def _rng(cfg: TrainConfig, *keys) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, *keys])


class Trainer:
    """Owns the nets, optimizers and pseudo-label cache of one run."""

    def __init__(self, cfg: TrainConfig, dataset: Dataset, out_dir=None, swap_ab: bool = False):
        self.cfg = cfg
        self.dataset = dataset
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.counters: Counter = Counter()
        meta = dataset.meta
        self.train, self.val = split_labeled(dataset.labeled, cfg.val_fraction, cfg.seed)
        if len(self.train) == 0:
            raise TrainingError("no labeled training samples")
        self.unlabeled = dataset.unlabeled
        self.hm_dims = tuple(meta.heatmap_dims)
        self.nets: dict[str, Net] = {}
        init_slot = {"A": 0, "B": 1, "C": 2}
        if swap_ab:
            init_slot.update(A=1, B=0)
        for name in cfg.nets:
            width = cfg.teacher_width if name in ("A", "B") else 1.0
            arch = ArchConfig(meta.K, tuple(meta.image_dims), cfg.channels, cfg.strides, None, width)
            params = init_estimator(arch, _rng(cfg, _INIT, init_slot[name]))
            self.nets[name] = Net(name, params, AdamState.zeros_like(params))
        self.cache = None
        if cfg.method == "sspcm":
            self.cache = PLCache(self.unlabeled.ids, (meta.K,) + self.hm_dims)
        self.report = RunReport(method=cfg.method, reported_net=cfg.reported_net, counters=self.counters)
        self._val_diags = self.val.bbox_diags() if len(self.val) else None

    # -- batching ----------------------------------------------------------

    def iterations(self) -> int:
        return max(1, math.ceil(len(self.unlabeled) / self.cfg.batch_size)) if len(self.unlabeled) \
            else max(1, math.ceil(len(self.train) / self.cfg.batch_size))

    def _labeled_order(self, epoch: int, count: int) -> np.ndarray:
        rng = _rng(self.cfg, _LABELED, epoch)
        reps = math.ceil(count / len(self.train))
        return np.concatenate([rng.permutation(len(self.train)) for _ in range(reps)])[:count]

    # -- one epoch ---------------------------------------------------------

    def train_epoch(self, epoch: int) -> dict:
        cfg = self.cfg
        lr = lr_at(cfg.schedule, epoch)
        iters = self.iterations()
        bs = cfg.batch_size
        lab_order = self._labeled_order(epoch, iters * bs)
        unl_order = _rng(cfg, _PERM, epoch).permutation(len(self.unlabeled)) if len(self.unlabeled) else None
        sums = Counter()
        for b in range(iters):
            lab = lab_order[b * bs:(b + 1) * bs]
            unl = None if unl_order is None else unl_order[b * bs:(b + 1) * bs]
            losses = self.train_batch(epoch, b, lab, unl, lr)
            for key, v in losses.items():
                if not math.isfinite(v):
                    raise TrainingError(f"epoch {epoch} batch {b}: non-finite {key}")
                sums[key] += v
            self.report.batch_log.append(dict(losses, epoch=epoch, batch=b))
        if self.cache is not None:
            self.cache.promote()
        row = {"epoch": epoch, "lr": lr}
        for key in ("l_sup", "l_unsup1", "l_unsup2", "l_unsup3", "l_final"):
            row[key] = sums[key] / iters
        for name in ("A", "B", "C"):
            row[f"pck_{name.lower()}"] = self.val_pck(name)
        return row

    def train_batch(self, epoch: int, b: int, lab: np.ndarray, unl: np.ndarray | None, lr: float) -> dict:
        cfg = self.cfg
        image_dims = self.train.images.shape[1:]
        losses = {"l_sup": 0.0, "l_unsup1": 0.0, "l_unsup2": 0.0, "l_unsup3": 0.0}

        # step 1
        x_l = self.train.images[lab]
        easy_l = sample_affines(_rng(cfg, _LAUG, epoch, b), len(lab), cfg.easy_rotation,
                                cfg.easy_scale, image_dims)
        losses["l_sup"], _ = train_step1_supervised(
            [self.nets[n] for n in cfg.nets], x_l, self.train.keypoints[lab], easy_l, cfg, lr,
            self.counters)

        if cfg.method != "supervised" and unl is not None and len(unl):
            x_u = self.unlabeled.images[unl]
            ids = self.unlabeled.ids[unl]
            rng = _rng(cfg, _CROSS, epoch, b)
            easy = sample_affines(rng, len(unl), cfg.easy_rotation, cfg.easy_scale, image_dims)
            hard = sample_affines(rng, len(unl), cfg.hard_rotation, cfg.hard_scale, image_dims)
            net_a, net_b = self.nets["A"], self.nets["B"]
            # both teachers label the batch before either student update
            pseudo_a = teacher_pass(net_a, x_u, easy)
            pseudo_b = teacher_pass(net_b, x_u, easy)
            mask_cross = cfg.mask_steps == "all"

            # step 2: A teaches B
            sum_a = net_a.params.checksum()
            losses["l_unsup1"] = train_step_cross(pseudo_a, net_b, x_u, hard, cfg, lr,
                                                  _rng(cfg, _CROSS, epoch, b, 1), self.counters,
                                                  mask_cross)
            self._check_frozen(net_a, sum_a, "step 2")
            # step 3: B teaches A
            sum_b = net_b.params.checksum()
            losses["l_unsup2"] = train_step_cross(pseudo_b, net_a, x_u, hard, cfg, lr,
                                                  _rng(cfg, _CROSS, epoch, b, 1), self.counters,
                                                  mask_cross)
            self._check_frozen(net_b, sum_b, "step 3")

            if cfg.method == "sspcm":
                sums = net_a.params.checksum(), net_b.params.checksum()
                rng4 = _rng(cfg, _STEP4, epoch, b)
                hard4 = sample_affines(rng4, len(unl), cfg.hard_rotation, cfg.hard_scale, image_dims)
                losses["l_unsup3"], _ = train_step4_pcm(
                    self.nets["C"], pseudo_a.canonical_heatmaps(), pseudo_b.canonical_heatmaps(),
                    self.cache, ids, x_u, hard4, cfg, lr, rng4, self.counters)
                self._check_frozen(net_a, sums[0], "step 4")
                self._check_frozen(net_b, sums[1], "step 4")
        losses["l_final"] = losses["l_sup"] + cfg.beta * (
            losses["l_unsup1"] + losses["l_unsup2"] + losses["l_unsup3"])
        return losses

    def _check_frozen(self, net: Net, before: str, where: str) -> None:
        self.counters["teacher_checks"] += 1
        if net.params.checksum() != before:
            self.counters["teacher_mutations"] += 1
            raise TeacherMutation(f"teacher {net.name} was modified during {where}")

    # -- evaluation / io ---------------------------------------------------

    def val_pck(self, name: str) -> float:
        if name not in self.nets or self._val_diags is None:
            return float("nan")
        return evalanalysis.evaluate_pck(self.nets[name].params, self.val.images, self.val.keypoints,
                                         self._val_diags, self.cfg.eval_alpha)

    def test_pck(self, alpha: float | None = None) -> dict[str, float]:
        test = self.dataset.test
        if len(test) == 0:
            return {}
        diags = test.bbox_diags()
        a = self.cfg.eval_alpha if alpha is None else alpha
        return {name: evalanalysis.evaluate_pck(net.params, test.images, test.keypoints, diags, a)
                for name, net in self.nets.items()}

    def snapshot(self, epoch: int) -> None:
        if self.out_dir is None:
            return
        snap = self.out_dir / "snapshots"
        snap.mkdir(parents=True, exist_ok=True)
        for name, net in self.nets.items():
            save_params(net.params, snap / f"epoch_{epoch:03d}_{name}.bin",
                        {"net": name, "epoch": epoch, "method": self.cfg.method, "seed": self.cfg.seed})

    def run(self) -> RunReport:
        cfg = self.cfg
        start = time.perf_counter()
        metrics = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            metrics = open(self.out_dir / "metrics.csv", "w", encoding="utf-8", newline="\n")
            metrics.write(",".join(CSV_COLUMNS) + "\n")
        try:
            for epoch in range(cfg.epochs):
                row = self.train_epoch(epoch)
                self.report.rows.append(row)
                log.info("epoch %d lr %.0e l_sup %.5f unsup %.5f/%.5f/%.5f pck %s", epoch, row["lr"],
                         row["l_sup"], row["l_unsup1"], row["l_unsup2"], row["l_unsup3"],
                         " ".join(f"{n}={row['pck_' + n.lower()]:.3f}" for n in cfg.nets))
                if metrics is not None:
                    metrics.write(format_metrics_row(row))
                    metrics.flush()
                last = epoch == cfg.epochs - 1
                if cfg.snapshot_every and ((epoch + 1) % cfg.snapshot_every == 0 or last):
                    self.snapshot(epoch)
        finally:
            if metrics is not None:
                metrics.close()
        self.report.final_test_pck = self.test_pck()
        self.report.wall_clock = time.perf_counter() - start
        return self.report


def run_training(cfg: TrainConfig, dataset: Dataset, out_dir=None) -> RunReport:
    return Trainer(cfg, dataset, out_dir).run()
