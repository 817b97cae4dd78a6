"""Compact convolutional heatmap regressor with hand-written backprop and Adam."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .geometry import HEATMAP_STRIDE


@dataclass(frozen=True)
class ArchConfig:
    """Layer layout. ``channels`` are the hidden widths before the width multiplier.

    ``strides`` and ``upsample_after`` describe the trunk; the head is a 1x1
    conv to ``K`` channels. Total stride must equal the heatmap stride.
    """

    K: int = 11
    image_dims: tuple[int, int] = (64, 48)
    channels: tuple[int, ...] = (8, 16, 16, 16)
    strides: tuple[int, ...] = (1, 2, 2, 1)
    upsample_after: int | None = None
    width: float = 1.0

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(max(1, int(round(c * self.width))) for c in self.channels)

    @property
    def heatmap_dims(self) -> tuple[int, int]:
        h, w = self.image_dims
        return h // HEATMAP_STRIDE, w // HEATMAP_STRIDE

    def layers(self) -> list[tuple]:
        out = []
        cin = 1
        for i, (c, s) in enumerate(zip(self.hidden, self.strides)):
            out.append(("conv", f"conv{i + 1}", cin, c, 3, s, True))
            if self.upsample_after is not None and i + 1 == self.upsample_after:
                out.append(("up", f"up{i + 1}", 2))
            cin = c
        out.append(("conv", "head", cin, self.K, 1, 1, False))
        return out

    def to_json(self) -> dict:
        return {"K": self.K, "image_dims": list(self.image_dims), "channels": list(self.channels),
                "strides": list(self.strides), "upsample_after": self.upsample_after,
                "width": self.width}

    @classmethod
    def from_json(cls, d: dict) -> "ArchConfig":
        return cls(d["K"], tuple(d["image_dims"]), tuple(d["channels"]), tuple(d["strides"]),
                   d["upsample_after"], d["width"])


@dataclass
class EstimatorParams:
    arch: ArchConfig
    tensors: dict[str, np.ndarray]

    def names(self) -> list[str]:
        return list(self.tensors)

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "EstimatorParams":
        return EstimatorParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t).tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> "EstimatorParams":
        return EstimatorParams(self.arch, {k: v.astype(dtype) for k, v in self.tensors.items()})


HEAD_INIT_STD = 1e-3


def init_estimator(arch: ArchConfig, rng: np.random.Generator, dtype=np.float32) -> EstimatorParams:
    """He-uniform trunk weights, small Gaussian head weights, zero biases."""
    tensors = {}
    for layer in arch.layers():
        if layer[0] != "conv":
            continue
        _, name, cin, cout, k, _, relu = layer
        fan_in = cin * k * k
        # weights laid out (k*k*cin, cout) to match the im2col column order
        if relu:
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(k * k * cin, cout))
        else:
            # heatmap head starts near zero, as in common pose backbones
            w = rng.normal(0.0, HEAD_INIT_STD, size=(k * k * cin, cout))
        tensors[f"{name}.w"] = w.astype(dtype)
        tensors[f"{name}.b"] = np.zeros(cout, dtype=dtype)
    return EstimatorParams(arch, tensors)


# ---------------------------------------------------------------------------
# Layer primitives (NHWC)


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N*ho*wo, k*k*C) patches of an already padded NHWC array."""
    n, _, _, c = xp.shape
    sn, sh, sw, sc = xp.strides
    view = as_strided(xp, (n, ho, wo, k, k, c), (sn, sh * stride, sw * stride, sh, sw, sc),
                      writeable=False)
    return np.ascontiguousarray(view).reshape(n * ho * wo, k * k * c)


def _im2col(x: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, tuple]:
    n, h, w, c = x.shape
    pad = k // 2
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if k == 1 and stride == 1:
        return x.reshape(n * h * w, c), (n, h, w, c, ho, wo)
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    xp[:, pad:pad + h, pad:pad + w] = x
    return _windows(xp, k, stride, ho, wo), (n, h, w, c, ho, wo)


def _input_grad(g: np.ndarray, weight: np.ndarray, geom: tuple, k: int, stride: int) -> np.ndarray:
    """Gradient w.r.t. the conv input.

    Stride 1 runs as a conv of the output gradient with the flipped kernel;
    strided layers scatter-add the column gradients back (cheaper there).
    """
    n, h, w, cin, ho, wo = geom
    cout = g.shape[-1]
    if k == 1 and stride == 1:
        return (g.reshape(-1, cout) @ weight.T).reshape(n, h, w, cin)
    pad = k // 2
    if stride == 1:
        gp = np.zeros((n, h + 2 * pad, w + 2 * pad, cout), dtype=g.dtype)
        gp[:, pad:pad + ho, pad:pad + wo] = g
        flipped = weight.reshape(k, k, cin, cout)[::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, cin)
        return (_windows(gp, k, 1, h, w) @ flipped).reshape(n, h, w, cin)
    dcols = (g.reshape(-1, cout) @ weight.T).reshape(n, ho, wo, k * k, cin)
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, cin), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, i * k + j]
    return dxp[:, pad:pad + h, pad:pad + w]


class Tape:
    """Cached activations of one forward pass, consumable by one backward."""

    def __init__(self, params: EstimatorParams):
        self.params = params
        self.records: list[tuple] = []
        self.dout: np.ndarray | None = None
        self.consumed = False


def forward(params: EstimatorParams, images: np.ndarray, tape: bool = True):
    """Run the network on (N, H, W) images.

    Returns ``(heatmaps, tape)`` with heatmaps shaped (N, K, Hh, Wh); the
    tape is None when ``tape`` is False.
    """
    arch = params.arch
    x = np.asarray(images)
    if x.ndim != 3 or tuple(x.shape[1:]) != tuple(arch.image_dims):
        raise ValueError(f"expected images (N, {arch.image_dims[0]}, {arch.image_dims[1]}), got {x.shape}")
    dtype = params.tensors["head.w"].dtype
    x = x.astype(dtype, copy=False)[..., None]
    t = Tape(params) if tape else None
    for layer in arch.layers():
        if layer[0] == "up":
            if t is not None:
                t.records.append(("up", layer[2]))
            f = layer[2]
            x = x.repeat(f, axis=1).repeat(f, axis=2)
            continue
        _, name, cin, cout, k, stride, relu = layer
        cols, geom = _im2col(x, k, stride)
        y = cols @ params.tensors[f"{name}.w"]
        y += params.tensors[f"{name}.b"]
        n, _, _, _, ho, wo = geom
        y = y.reshape(n, ho, wo, cout)
        if relu:
            y = np.maximum(y, 0, out=y)
        if t is not None:
            t.records.append(("conv", name, cols, geom, k, stride, relu, y if relu else None))
        x = y
    hm = x.transpose(0, 3, 1, 2)
    if hm.shape[2:] != arch.heatmap_dims:
        raise ValueError(f"architecture produced {hm.shape[2:]} heatmaps, expected {arch.heatmap_dims}")
    return np.ascontiguousarray(hm), t


def predict(params: EstimatorParams, images: np.ndarray, batch: int = 128) -> np.ndarray:
    """Tape-free forward in chunks (teacher and evaluation passes)."""
    images = np.asarray(images)
    outs = [forward(params, images[i:i + batch], tape=False)[0] for i in range(0, len(images), batch)]
    if not outs:
        h, w = params.arch.heatmap_dims
        return np.zeros((0, params.arch.K, h, w), dtype=params.tensors["head.w"].dtype)
    return np.concatenate(outs)


def mse_masked_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray,
                    tape: Tape | None = None) -> float:
    """Mean squared error over unmasked channel pixels; 0 when all masked.

    When ``tape`` is given, d(loss)/d(pred) is stored on it for ``backward``.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    mask = np.asarray(mask)
    if pred.shape != target.shape or mask.shape != pred.shape[:2]:
        raise ValueError(f"shape mismatch: pred {pred.shape}, target {target.shape}, mask {mask.shape}")
    npix = pred.shape[2] * pred.shape[3]
    denom = float(mask.sum()) * npix
    if denom == 0:
        if tape is not None:
            tape.dout = np.zeros_like(pred)
        return 0.0
    diff = (pred.astype(np.float64) - target) * mask[:, :, None, None]
    loss = float(np.sum(diff * diff) / denom)
    if tape is not None:
        tape.dout = (2.0 / denom * diff).astype(pred.dtype)
    return loss


def backward(tape: Tape, dout: np.ndarray | None = None, scale: float = 1.0) -> dict[str, np.ndarray]:
    """Reverse pass; returns gradients keyed like the parameter tensors."""
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward")
    if dout is None:
        dout = tape.dout
    if dout is None:
        raise RuntimeError("no loss recorded on tape; pass dout explicitly")
    tape.consumed = True
    params = tape.params
    g = np.asarray(dout).transpose(0, 2, 3, 1)
    if scale != 1.0:
        g = g * scale
    grads: dict[str, np.ndarray] = {}
    for idx in range(len(tape.records) - 1, -1, -1):
        rec = tape.records[idx]
        if rec[0] == "up":
            f = rec[1]
            n, h, w, c = g.shape
            g = g.reshape(n, h // f, f, w // f, f, c).sum(axis=(2, 4))
            continue
        _, name, cols, geom, k, stride, relu, y = rec
        if relu:
            g = g * (y > 0)
        cout = g.shape[-1]
        g2 = g.reshape(-1, cout)
        grads[f"{name}.w"] = cols.T @ g2
        grads[f"{name}.b"] = g2.sum(axis=0)
        if idx > 0:
            g = _input_grad(g, params.tensors[f"{name}.w"], geom, k, stride)
    tape.records = []
    return {name: grads[name] for name in params.tensors}


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: EstimatorParams, **kw) -> "AdamState":
        return cls({k: np.zeros(t.shape) for k, t in params.tensors.items()},
                   {k: np.zeros(t.shape) for k, t in params.tensors.items()}, **kw)


def adam_step(state: AdamState, params: EstimatorParams, grads: dict[str, np.ndarray],
              lr: float) -> tuple[EstimatorParams, AdamState]:
    """One bias-corrected Adam update, in place. Moments are kept in float64."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in layer {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.tensors.items():
        g = grads[name].astype(np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p -= update.astype(p.dtype)
    return params, state


@dataclass(frozen=True)
class LRSchedule:
    base_lr: float = 1e-3
    decay_epochs: tuple[int, ...] = (40, 50)
    factor: float = 0.1

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError(f"decay epochs must be strictly increasing: {self.decay_epochs}")


def lr_at(schedule: LRSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    drops = sum(1 for e in schedule.decay_epochs if e <= epoch)
    return schedule.base_lr * schedule.factor ** drops


# ---------------------------------------------------------------------------
# Snapshots: magic, u32 header length, JSON header, little-endian tensor bytes

MAGIC = b"SSPCMPRM"


def save_params(params: EstimatorParams, path, extra: dict | None = None) -> None:
    entries = []
    offset = 0
    blobs = []
    for name, t in params.tensors.items():
        arr = np.ascontiguousarray(t, dtype=t.dtype.newbyteorder("<"))
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": arr.dtype.str, "offset": offset,
                        "nbytes": len(blob)})
        offset += len(blob)
        blobs.append(blob)
    header = json.dumps({"arch": params.arch.to_json(), "tensors": entries, "extra": extra or {}},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_params(path) -> EstimatorParams:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a parameter snapshot")
    (hlen,) = struct.unpack("<I", raw[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    body = raw[start + hlen:]
    tensors = {}
    for e in header["tensors"]:
        arr = np.frombuffer(body, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return EstimatorParams(ArchConfig.from_json(header["arch"]), tensors)
