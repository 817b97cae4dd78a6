"""Command-line entry points: gen-data, train, eval, analyze."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .estimator import load_params
from .evalanalysis import analyze_pi, evaluate_pck, write_analysis
from .geometry import Pose
from .synthdata import DatasetError, bbox_diagonal, generate_dataset, load_dataset, load_oracle
from .trainer import METHODS, TrainConfig, Trainer

log = logging.getLogger("sspcm")


class ConfigError(ValueError):
    pass


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Flat key = value configs


def _field_defaults() -> dict:
    return {f.name: f.default for f in fields(TrainConfig)}


def _parse_value(key: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, tuple):
            elem = type(default[0]) if default else float
            return tuple(elem(v) for v in text.replace(",", " ").split())
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        return type(default)(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are fatal."""
    defaults = _field_defaults()
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = _parse_value(key, value, defaults[key])
    return out


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: TrainConfig) -> str:
    lines = [f"# resolved configuration (sspcm {__version__})"]
    for f in fields(TrainConfig):
        lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def load_config(path) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        return TrainConfig(**parse_config(text, str(path)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------------------
# Commands


def _image_size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError(f"image size must be positive, got {text!r}")
    return h, w


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _prepare_dir(path: Path, force: bool, what: str) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"{what} {path} exists and is not empty (use --force)")
        for child in path.iterdir():
            if child.is_dir():
                shutil.rmtree(child)
            else:
                child.unlink()
    path.mkdir(parents=True, exist_ok=True)


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    _prepare_dir(out, args.force, "dataset directory")
    meta = generate_dataset(out, args.labeled, args.unlabeled, args.test, seed=args.seed,
                            image_dims=args.image_size)
    print(f"wrote {meta.n_labeled + meta.n_unlabeled + meta.n_test} samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    overrides = {}
    if args.method is not None:
        overrides["method"] = args.method
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = cfg.replace(**overrides)
    dataset = load_dataset(args.data)
    run = Path(args.out)
    _prepare_dir(run, args.force, "run directory")
    resolved = dump_config(cfg).encode("utf-8")
    (run / "config.txt").write_bytes(resolved)
    manifest = {
        "seed": cfg.seed,
        "method": cfg.method,
        "config_file": "config.txt",
        "config_sha256": _sha256(resolved),
        "source_config": str(Path(args.config).resolve()),
        "code_version": __version__,
        "dataset": str(Path(args.data).resolve()),
        "dataset_index_sha256": dataset.meta.index_sha256,
    }
    with open(run / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    report = Trainer(cfg, dataset, run).run()
    pck = report.test_pck
    with open(run / "result.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump({"final_test_pck": report.final_test_pck, "reported_net": report.reported_net,
                   "test_pck": pck, "counters": dict(report.counters)}, fh, indent=1, allow_nan=True)
        fh.write("\n")
    print(f"test PCK@{cfg.eval_alpha:g} (net {report.reported_net}): {pck:.4f}")
    return 0


def _split_arrays(dataset, split: str):
    if split == "unlabeled":
        oracle = load_oracle(dataset.root)
        s = dataset.unlabeled
        return s.images, np.stack([oracle[int(i)] for i in s.ids]), s.ids
    s = dataset[split]
    return s.images, s.keypoints, s.ids


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    params = load_params(args.params)
    images, kps, _ = _split_arrays(dataset, args.split)
    diags = np.array([bbox_diagonal(Pose(k, "canonical")) for k in kps])
    value = evaluate_pck(params, images, kps, diags, args.alpha)
    out = Path(args.params).with_name("eval.json")
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        json.dump({"params": str(Path(args.params).resolve()), "split": args.split,
                   "alpha": args.alpha, "n": int(len(images)), "pck": value}, fh, indent=1)
        fh.write("\n")
    print(f"PCK@{args.alpha:g} on {args.split}: {value:.4f}")
    return 0


def cmd_analyze(args) -> int:
    dataset = load_dataset(args.data)
    snap = Path(args.run) / "snapshots"
    paths = [snap / f"epoch_{args.epoch:03d}_{n}.bin" for n in ("A", "B")]
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(f"missing snapshot {p}")
    pa, pb = (load_params(p) for p in paths)
    tau = TrainConfig().tau
    cfg_path = Path(args.run) / "config.txt"
    if cfg_path.exists():
        tau = load_config(cfg_path).tau
    images, kps, ids = _split_arrays(dataset, args.split)
    rows, summary = analyze_pi(pa, pb, images, kps, ids, tau=tau)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_analysis(rows, summary, out, out.with_suffix(".summary.json"))
    print(f"{summary['n_rows']} rows; spearman(PI, error) = {summary['spearman_pi_vs_error']:.3f}; "
          f"spearman(conf, -error) = {summary['spearman_conf_vs_neg_error']:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sspcm", description=__doc__)
    p.add_argument("--version", action="version", version=f"sspcm {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic stick-figure dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--labeled", type=_nonneg_int, required=True)
    g.add_argument("--unlabeled", type=_nonneg_int, required=True)
    g.add_argument("--test", type=_nonneg_int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--image-size", type=_image_size, default=(64, 48), metavar="WxH",
                   help="image width x height (default 48x64)")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one run")
    t.add_argument("--data", required=True)
    t.add_argument("--config", required=True, help="flat 'key = value' file")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--method", choices=METHODS)
    t.add_argument("--seed", type=int)
    t.add_argument("--force", action="store_true", help="reuse a non-empty run directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="PCK of a parameter snapshot")
    e.add_argument("--data", required=True)
    e.add_argument("--params", required=True)
    e.add_argument("--split", choices=("test", "labeled", "unlabeled"), default="test")
    e.add_argument("--alpha", type=float, default=0.2)
    e.add_argument("--seed", type=int, help="accepted for uniformity; evaluation is deterministic")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="relate PI and confidence to pseudo-label error")
    a.add_argument("--data", required=True)
    a.add_argument("--run", required=True)
    a.add_argument("--epoch", type=int, required=True)
    a.add_argument("--out", required=True, help="CSV path; the summary goes next to it")
    a.add_argument("--split", choices=("unlabeled", "test"), default="unlabeled",
                   help="held-out data with oracle labels (default unlabeled)")
    a.add_argument("--seed", type=int, help="accepted for uniformity; analysis is deterministic")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 with usage on bad flags
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"sspcm: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"sspcm: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
