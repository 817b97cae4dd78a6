"""Shared test helpers (gradient-check instances)."""
import numpy as np

from sspcm.estimator import ArchConfig, backward, forward, init_estimator, mse_masked_loss

# reduced net touching every layer type: 3x3 conv stride 1 and 2, ReLU, 2x upsample, 1x1 head
SMALL = ArchConfig(K=3, image_dims=(32, 24), channels=(4, 6, 6, 6), strides=(1, 2, 2, 2), upsample_after=4)


def kink_free_instance(seed=0):
    """A double-precision instance whose ReLU pre-activations stay >= 0.3 away from 0.

    Hidden channels get biases of +1 (active) or -2 (dead). Channel 0 of the
    first layer reads only the center tap of a two-level image, so its mask
    varies with position.
    """
    rng = np.random.default_rng(seed)
    p = init_estimator(SMALL, rng, dtype=np.float64)
    for layer in SMALL.layers():
        if layer[0] != "conv":
            continue
        _, name, cin, cout, k, s, relu = layer
        if relu:
            p.tensors[f"{name}.w"] *= 0.25
            p.tensors[f"{name}.b"] = np.where(np.arange(cout) % 3 == 2, -2.0, 1.0) + rng.normal(0, 0.05, cout)
        else:
            p.tensors[f"{name}.w"] = rng.normal(0, 0.3, p.tensors[f"{name}.w"].shape)
            p.tensors[f"{name}.b"] = rng.normal(0, 0.1, cout)
    p.tensors["conv1.w"][:, 0] = 0.0
    p.tensors["conv1.w"][4, 0] = 1.0
    p.tensors["conv1.b"][0] = -0.5
    x = np.where(rng.random((2, 32, 24)) < 0.5, 0.1, 0.9)
    target = rng.random((2, 3, 8, 6))
    mask = np.ones((2, 3))
    mask[1, 2] = 0.0
    return p, x, target, mask


def relu_margins(p, x):
    _, tape = forward(p, x)
    out = []
    for rec in tape.records:
        if rec[0] == "conv" and rec[6]:
            pre = rec[2] @ p.tensors[rec[1] + ".w"] + p.tensors[rec[1] + ".b"]
            out.append(float(np.abs(pre).min()))
    return out


def finite_difference_errors(p, x, target, mask, h=1e-3):
    """Max elementwise relative error per tensor (central differences)."""
    hm, tape = forward(p, x)
    mse_masked_loss(hm, target, mask, tape)
    grads = backward(tape)
    errs = {}
    for name, t in p.tensors.items():
        fd = np.zeros_like(t)
        for i in np.ndindex(t.shape):
            old = t[i]
            t[i] = old + h
            lp = mse_masked_loss(forward(p, x, tape=False)[0], target, mask)
            t[i] = old - h
            lm = mse_masked_loss(forward(p, x, tape=False)[0], target, mask)
            t[i] = old
            fd[i] = (lp - lm) / (2 * h)
        errs[name] = float((np.abs(fd - grads[name]) / np.maximum(1e-8, np.abs(fd) + np.abs(grads[name]))).max())
    return errs
