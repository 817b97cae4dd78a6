"""Synthetic stick-figure pose dataset: generation, PGM storage, loading."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import HEATMAP_STRIDE, Pose

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
SPLITS = ("labeled", "unlabeled", "test")


@dataclass(frozen=True)
class Edge:
    parent: int
    child: int
    length: tuple[float, float]
    angle: tuple[float, float]


@dataclass(frozen=True)
class Skeleton:
    names: tuple[str, ...]
    edges: tuple[Edge, ...]
    root: int

    @property
    def K(self) -> int:
        return len(self.names)

    def __post_init__(self):
        children = [e.child for e in self.edges]
        if sorted(children + [self.root]) != list(range(self.K)):
            raise ValueError("skeleton edges must form a tree covering every keypoint once")
        seen = {self.root}
        for e in self.edges:
            if e.parent not in seen:
                raise ValueError(f"edge {e} listed before its parent is placed")
            seen.add(e.child)

    def to_json(self) -> dict:
        return {"names": list(self.names), "root": self.root,
                "edges": [[e.parent, e.child, list(e.length), list(e.angle)] for e in self.edges]}

    @classmethod
    def from_json(cls, d: dict) -> "Skeleton":
        return cls(tuple(d["names"]),
                   tuple(Edge(p, c, tuple(ln), tuple(an)) for p, c, ln, an in d["edges"]),
                   d["root"])


KEYPOINT_NAMES = ("head", "neck", "pelvis", "l_elbow", "r_elbow", "l_wrist", "r_wrist",
                  "l_knee", "r_knee", "l_ankle", "r_ankle")


def default_skeleton() -> Skeleton:
    # angles are relative to the parent's direction; the root direction is
    # the global orientation (pointing up the torso)
    idx = {n: i for i, n in enumerate(KEYPOINT_NAMES)}
    e = [
        ("pelvis", "neck", (9.0, 11.0), (-10.0, 10.0)),
        ("neck", "head", (4.0, 5.0), (-20.0, 20.0)),
        ("neck", "l_elbow", (6.0, 7.5), (110.0, 160.0)),
        ("neck", "r_elbow", (6.0, 7.5), (-160.0, -110.0)),
        ("l_elbow", "l_wrist", (5.0, 6.5), (-60.0, 30.0)),
        ("r_elbow", "r_wrist", (5.0, 6.5), (-30.0, 60.0)),
        ("pelvis", "l_knee", (7.0, 8.5), (150.0, 175.0)),
        ("pelvis", "r_knee", (7.0, 8.5), (-175.0, -150.0)),
        ("l_knee", "l_ankle", (6.5, 8.0), (-25.0, 15.0)),
        ("r_knee", "r_ankle", (6.5, 8.0), (-15.0, 25.0)),
    ]
    edges = tuple(Edge(idx[p], idx[c], ln, an) for p, c, ln, an in e)
    return Skeleton(KEYPOINT_NAMES, edges, idx["pelvis"])


def sample_pose(rng: np.random.Generator, skeleton: Skeleton, canvas_dims: tuple[int, int],
                orientation_range: tuple[float, float] = (-180.0, 180.0)) -> Pose:
    """Draw a random articulated pose on an (H, W) canvas.

    Keypoints landing outside the canvas get conf 0.
    """
    h, w = canvas_dims
    K = skeleton.K
    xy = np.zeros((K, 2))
    direction = np.zeros(K)
    root = np.array([rng.uniform(0.25 * (w - 1), 0.75 * (w - 1)),
                     rng.uniform(0.25 * (h - 1), 0.75 * (h - 1))])
    xy[skeleton.root] = root
    # "up" is -y; orientation rotates it with the y-down convention
    direction[skeleton.root] = math.radians(rng.uniform(*orientation_range)) - math.pi / 2
    for e in skeleton.edges:
        length = rng.uniform(*e.length)
        ang = direction[e.parent] + math.radians(rng.uniform(*e.angle))
        direction[e.child] = ang
        xy[e.child] = xy[e.parent] + length * np.array([math.cos(ang), math.sin(ang)])
    inside = (xy[:, 0] >= 0) & (xy[:, 0] <= w - 1) & (xy[:, 1] >= 0) & (xy[:, 1] <= h - 1)
    data = np.column_stack([xy, inside.astype(np.float64)])
    data[~inside, :2] = 0.0
    return Pose(data, "canonical")


def _segment_distance(px, py, a, b):
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0:
        return np.hypot(px - a[0], py - a[1])
    t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def render_figure(pose: Pose, canvas_dims: tuple[int, int], rng: np.random.Generator,
                  skeleton: Skeleton | None = None) -> np.ndarray:
    """Anti-aliased dark strokes and head disc on a light noisy background."""
    if pose.frame != "canonical":
        raise ValueError("render_figure expects a canonical-frame pose")
    skeleton = skeleton or default_skeleton()
    h, w = canvas_dims
    background = rng.uniform(0.8, 1.0)
    ink = rng.uniform(0.0, 0.3)
    width = rng.uniform(2.0, 3.0)
    radius = rng.uniform(2.0, 4.0)
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    cover = np.zeros((h, w))
    data = pose.data
    for e in skeleton.edges:
        if data[e.parent, 2] > 0 and data[e.child, 2] > 0:
            d = _segment_distance(px, py, data[e.parent, :2], data[e.child, :2])
            cover = np.maximum(cover, np.clip(width / 2 + 0.5 - d, 0.0, 1.0))
    head = skeleton.names.index("head") if "head" in skeleton.names else None
    if head is not None and data[head, 2] > 0:
        d = np.hypot(px - data[head, 0], py - data[head, 1])
        cover = np.maximum(cover, np.clip(radius + 0.5 - d, 0.0, 1.0))
    img = background + (ink - background) * cover
    img = img + rng.normal(0.0, 0.02, size=(h, w))
    return np.clip(img, 0.0, 1.0)


def bbox_diagonal(pose: Pose) -> float:
    vis = pose.conf > 0
    if not vis.any():
        return 0.0
    pts = pose.xy[vis]
    span = pts.max(axis=0) - pts.min(axis=0)
    return float(math.hypot(span[0], span[1]))


# ---------------------------------------------------------------------------
# PGM


class DatasetError(Exception):
    """Base class for dataset load failures."""


class VersionMismatch(DatasetError):
    pass


class ChecksumMismatch(DatasetError):
    pass


class CountMismatch(DatasetError):
    pass


class MissingImage(DatasetError):
    pass


class PGMParseError(DatasetError):
    pass


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_pgm(pixels: np.ndarray) -> bytes:
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.astype(np.uint8).tobytes()


def decode_pgm(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PGMParseError(f"{source}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise PGMParseError(f"{source}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise PGMParseError(f"{source}: bad PGM header field") from exc
    if maxval != 255 or w <= 0 or h <= 0:
        raise PGMParseError(f"{source}: unsupported PGM geometry {w}x{h} maxval {maxval}")
    body = raw[pos:]
    if len(body) != w * h:
        raise PGMParseError(f"{source}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------------------
# Dataset container


@dataclass(frozen=True)
class DatasetMeta:
    K: int
    skeleton: Skeleton
    image_dims: tuple[int, int]
    heatmap_dims: tuple[int, int]
    seed: int
    n_labeled: int
    n_unlabeled: int
    n_test: int
    version: int = FORMAT_VERSION
    index_sha256: str = ""
    images_sha256: str = ""

    def to_json(self) -> dict:
        return {"format_version": self.version, "K": self.K, "skeleton": self.skeleton.to_json(),
                "image_dims": list(self.image_dims), "heatmap_dims": list(self.heatmap_dims),
                "seed": self.seed, "n_labeled": self.n_labeled, "n_unlabeled": self.n_unlabeled,
                "n_test": self.n_test, "index_sha256": self.index_sha256,
                "images_sha256": self.images_sha256}

    @classmethod
    def from_json(cls, d: dict) -> "DatasetMeta":
        return cls(d["K"], Skeleton.from_json(d["skeleton"]), tuple(d["image_dims"]),
                   tuple(d["heatmap_dims"]), d["seed"], d["n_labeled"], d["n_unlabeled"],
                   d["n_test"], d["format_version"], d.get("index_sha256", ""),
                   d.get("images_sha256", ""))


@dataclass
class Split:
    """Arrays for one split. ``keypoints`` is None for unlabeled data."""

    name: str
    ids: np.ndarray
    images: np.ndarray  # (N, H, W) float32 in [0, 1]
    keypoints: np.ndarray | None  # (N, K, 3) image-frame

    def __len__(self) -> int:
        return len(self.ids)

    def pose(self, i: int) -> Pose:
        if self.keypoints is None:
            raise KeyError(f"split {self.name!r} carries no poses")
        return Pose(self.keypoints[i], "canonical")

    def bbox_diags(self) -> np.ndarray:
        if self.keypoints is None:
            raise KeyError(f"split {self.name!r} carries no poses")
        return np.array([bbox_diagonal(self.pose(i)) for i in range(len(self))])

    def subset(self, rows: np.ndarray, name: str | None = None) -> "Split":
        kps = None if self.keypoints is None else self.keypoints[rows]
        return Split(name or self.name, self.ids[rows], self.images[rows], kps)


@dataclass
class Dataset:
    meta: DatasetMeta
    splits: dict[str, Split] = field(default_factory=dict)
    root: Path | None = None

    def __getitem__(self, name: str) -> Split:
        return self.splits[name]

    @property
    def labeled(self) -> Split:
        return self.splits["labeled"]

    @property
    def unlabeled(self) -> Split:
        return self.splits["unlabeled"]

    @property
    def test(self) -> Split:
        return self.splits["test"]


def _sample_rng(seed: int, sample_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, sample_id])


def make_sample(seed: int, sample_id: int, skeleton: Skeleton,
                image_dims: tuple[int, int]) -> tuple[np.ndarray, Pose]:
    """Pose and 8-bit image for one id; depends only on (seed, id)."""
    rng = _sample_rng(seed, sample_id)
    pose = sample_pose(rng, skeleton, image_dims)
    img = render_figure(pose, image_dims, rng, skeleton)
    return quantize(img), pose


def _dumps(obj) -> str:
    return json.dumps(obj, indent=1) + "\n"


def generate_dataset(out_dir, n_labeled: int, n_unlabeled: int, n_test: int, seed: int = 0,
                     image_dims: tuple[int, int] = (64, 48),
                     skeleton: Skeleton | None = None) -> DatasetMeta:
    """Write meta.json, index.json, oracle.json and one PGM per sample."""
    skeleton = skeleton or default_skeleton()
    h, w = image_dims
    if h % HEATMAP_STRIDE or w % HEATMAP_STRIDE:
        raise ValueError(f"image dims {image_dims} must be divisible by {HEATMAP_STRIDE}")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc

    index = []
    oracle = {}
    digest = hashlib.sha256()
    counts = (("labeled", n_labeled), ("unlabeled", n_unlabeled), ("test", n_test))
    next_id = 0
    for split, count in counts:
        for _ in range(count):
            sid = next_id
            next_id += 1
            pixels, pose = make_sample(seed, sid, skeleton, image_dims)
            name = f"images/{sid:06d}.pgm"
            raw = encode_pgm(pixels)
            digest.update(raw)
            path = out / name
            try:
                path.write_bytes(raw)
            except OSError as exc:
                raise OSError(f"cannot write {path}: {exc}") from exc
            kps = pose.data.tolist()
            if split == "unlabeled":
                oracle[str(sid)] = kps
                kps = None
            index.append({"id": sid, "split": split, "image": name, "keypoints": kps})

    index_text = _dumps(index)
    meta = DatasetMeta(skeleton.K, skeleton, (h, w), (h // HEATMAP_STRIDE, w // HEATMAP_STRIDE),
                       seed, n_labeled, n_unlabeled, n_test, FORMAT_VERSION,
                       hashlib.sha256(index_text.encode()).hexdigest(), digest.hexdigest())
    for fname, text in (("index.json", index_text), ("oracle.json", _dumps(oracle)),
                        ("meta.json", _dumps(meta.to_json()))):
        path = out / fname
        try:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
    log.info("wrote %d samples to %s", next_id, out)
    return meta


def load_meta(root) -> DatasetMeta:
    root = Path(root)
    with open(root / "meta.json", encoding="utf-8") as fh:
        raw = json.load(fh)
    if raw.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"{root}: format version {raw.get('format_version')} != {FORMAT_VERSION}")
    return DatasetMeta.from_json(raw)


def load_dataset(root, verify: bool = True) -> Dataset:
    """Load a generated dataset. Never touches oracle.json."""
    root = Path(root)
    meta = load_meta(root)
    index_bytes = (root / "index.json").read_bytes()
    if verify and hashlib.sha256(index_bytes).hexdigest() != meta.index_sha256:
        raise ChecksumMismatch(f"{root / 'index.json'}: checksum does not match meta.json")
    index = json.loads(index_bytes.decode("utf-8"))

    expected = {"labeled": meta.n_labeled, "unlabeled": meta.n_unlabeled, "test": meta.n_test}
    found = {s: sum(1 for e in index if e["split"] == s) for s in SPLITS}
    if found != expected or len(index) != sum(expected.values()):
        raise CountMismatch(f"{root}: index counts {found} do not match meta counts {expected}")
    ids = [e["id"] for e in index]
    if len(set(ids)) != len(ids):
        raise CountMismatch(f"{root}: duplicate ids in index")

    h, w = meta.image_dims
    digest = hashlib.sha256()
    rows: dict[str, list] = {s: [] for s in SPLITS}
    for entry in index:
        path = root / entry["image"]
        try:
            raw = path.read_bytes()
        except FileNotFoundError as exc:
            raise MissingImage(f"sample {entry['id']}: missing image file {path}") from exc
        digest.update(raw)
        pixels = decode_pgm(raw, str(path))
        if pixels.shape != (h, w):
            raise PGMParseError(f"{path}: image is {pixels.shape}, expected {(h, w)}")
        kps = entry["keypoints"]
        if (kps is None) != (entry["split"] == "unlabeled"):
            raise DatasetError(f"sample {entry['id']}: keypoints presence does not match split")
        if kps is not None:
            arr = np.asarray(kps, dtype=np.float64)
            if arr.shape != (meta.K, 3):
                raise DatasetError(f"sample {entry['id']}: keypoints shape {arr.shape}")
            vis = arr[:, 2] > 0
            inside = (arr[:, 0] >= 0) & (arr[:, 0] <= w - 1) & (arr[:, 1] >= 0) & (arr[:, 1] <= h - 1)
            if np.any(vis & ~inside):
                raise DatasetError(f"sample {entry['id']}: visible keypoint outside the image")
        rows[entry["split"]].append((entry["id"], pixels, kps))
    if verify and digest.hexdigest() != meta.images_sha256:
        raise ChecksumMismatch(f"{root}: image checksum does not match meta.json")

    splits = {}
    for name, entries in rows.items():
        sids = np.array([e[0] for e in entries], dtype=np.int64)
        imgs = (np.stack([e[1] for e in entries]).astype(np.float32) / np.float32(255.0)
                if entries else np.zeros((0, h, w), np.float32))
        kps = None
        if name != "unlabeled":
            kps = (np.array([e[2] for e in entries], dtype=np.float64) if entries
                   else np.zeros((0, meta.K, 3)))
        splits[name] = Split(name, sids, imgs, kps)
    return Dataset(meta, splits, root)


def load_oracle(root) -> dict[int, np.ndarray]:
    """Hidden ground truth for the unlabeled split (analysis only)."""
    with open(Path(root) / "oracle.json", encoding="utf-8") as fh:
        raw = json.load(fh)
    return {int(k): np.asarray(v, dtype=np.float64) for k, v in raw.items()}
