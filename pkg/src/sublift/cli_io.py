"""Image and flow I/O plus the batch command-line front end.

Usage::

    sublift rof --labels 2 --lambda 0.2 --out runs/rof
    sublift robust-rof --input noisy.png --labels 3 --nu 0.05 --mode both --out runs/rrof
    sublift flow --labels 5 --samples 33 --mu 0.5 --out runs/flow
    sublift adaptive --input noisy.pgm --labels 3 --samples 29 --out runs/adaptive

Without ``--input`` a seeded synthetic instance is generated.  The worker
count is read from ``SUBLIFT_WORKERS`` and recorded in the manifest.
"""

from __future__ import annotations

import argparse
import json
import os
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import __version__
from .label_space import build_uniform_triangulation
from .problems import (
    adaptive_denoising_problem,
    baseline_problem,
    flow_problem,
    gaussian_noise_image,
    piecewise_constant_image,
    robust_rof_problem,
    rof_problem,
    shifted_texture_pair,
)
from .projections import ProjectionError
from .solver import SolverConfig, SolverDivergence, solve, write_diagnostics

__all__ = [
    "load_image",
    "save_image",
    "save_flow",
    "load_flow",
    "flow_to_color",
    "RunConfig",
    "run",
    "main",
]

FLO_TAG = 202021.25
WORKERS_ENV = "SUBLIFT_WORKERS"


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# images


def load_image(path):
    """Read PNG/PPM/PGM into floats in [0, 1]; shape (H, W) or (H, W, c)."""
    path = Path(path)
    if path.suffix.lower() not in {".png", ".ppm", ".pgm", ".pnm"}:
        raise ValueError(f"unsupported image format: {path.suffix}")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            else:
                if mode not in ("L", "RGB"):
                    im = im.convert("RGB" if len(im.getbands()) >= 3 else "L")
                arr = np.asarray(im, dtype=np.float64) / 255.0
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return arr


def save_image(img, path):
    """Write an image with values in [0, 1] (clipped) as 8 bits.

    Two-channel fields are stored as RGB with an empty blue channel.
    """
    arr = np.asarray(img, dtype=float)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.ndim == 3 and arr.shape[2] == 2:
        arr = np.concatenate([arr, np.zeros(arr.shape[:2] + (1,))], axis=2)
    q = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q).save(path)


# ---------------------------------------------------------------------------
# optical flow files


def save_flow(flow, path, png_path=None):
    """Write a Middlebury ``.flo`` file and a color-coded PNG.

    ``flow[..., 0]`` is horizontal, ``flow[..., 1]`` vertical.  The PNG goes
    next to the ``.flo`` unless ``png_path`` is given.
    """
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError("flow must have shape (H, W, 2)")
    if not np.all(np.isfinite(flow)):
        raise ValueError("flow contains non-finite values")
    H, W = flow.shape[:2]
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_TAG))
        fh.write(struct.pack("<ii", W, H))
        fh.write(flow.astype("<f4").tobytes(order="C"))
    png = Path(png_path) if png_path is not None else path.with_suffix(".png")
    Image.fromarray(flow_to_color(flow)).save(png)
    return path, png


def load_flow(path):
    with open(path, "rb") as fh:
        (tag,) = struct.unpack("<f", fh.read(4))
        if tag != np.float32(FLO_TAG):
            raise ValueError(f"{path}: not a .flo file (tag {tag})")
        W, H = struct.unpack("<ii", fh.read(8))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != 2 * W * H:
        raise ValueError(f"{path}: truncated flow data")
    return data.reshape(H, W, 2).astype(np.float32)


def _color_wheel():
    RY, YG, GC, CB, BM, MR = 15, 6, 4, 11, 13, 6
    ncols = RY + YG + GC + CB + BM + MR
    wheel = np.zeros((ncols, 3))
    col = 0
    wheel[0:RY, 0] = 255
    wheel[0:RY, 1] = np.floor(255 * np.arange(RY) / RY)
    col += RY
    wheel[col:col + YG, 0] = 255 - np.floor(255 * np.arange(YG) / YG)
    wheel[col:col + YG, 1] = 255
    col += YG
    wheel[col:col + GC, 1] = 255
    wheel[col:col + GC, 2] = np.floor(255 * np.arange(GC) / GC)
    col += GC
    wheel[col:col + CB, 1] = 255 - np.floor(255 * np.arange(CB) / CB)
    wheel[col:col + CB, 2] = 255
    col += CB
    wheel[col:col + BM, 2] = 255
    wheel[col:col + BM, 0] = np.floor(255 * np.arange(BM) / BM)
    col += BM
    wheel[col:col + MR, 2] = 255 - np.floor(255 * np.arange(MR) / MR)
    wheel[col:col + MR, 0] = 255
    return wheel


def flow_to_color(flow, max_magnitude=None):
    """Middlebury color coding, normalized by the largest magnitude."""
    flow = np.asarray(flow, dtype=float)
    u, v = flow[..., 0], flow[..., 1]
    rad = np.hypot(u, v)
    rmax = float(rad.max()) if max_magnitude is None else float(max_magnitude)
    if rmax > 0:
        u, v, rad = u / rmax, v / rmax, rad / rmax
    wheel = _color_wheel()
    ncols = len(wheel)
    a = np.arctan2(-v, -u) / np.pi
    fk = (a + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = fk - k0
    img = np.empty(flow.shape[:2] + (3,), dtype=np.uint8)
    for ch in range(3):
        c0 = wheel[k0, ch] / 255.0
        c1 = wheel[k1, ch] / 255.0
        col = (1 - f) * c0 + f * c1
        inside = rad <= 1
        col = np.where(inside, 1 - rad * (1 - col), col * 0.75)
        img[..., ch] = np.floor(255 * col)
    return img


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunConfig:
    """Everything a run depends on; echoed into the manifest."""

    command: str
    inputs: list = field(default_factory=list)
    out: str = "out"
    labels: int = 3
    samples: Optional[int] = None
    lam: Optional[float] = None
    mu: float = 0.5
    nu: float = 0.05
    max_disp: float = 4.0
    iters: int = 10000
    tol: float = 1e-6
    seed: int = 0
    mode: str = "sublabel"
    size: int = 32
    preconditioning: bool = False
    step_ratio: Optional[float] = None
    label_scaling: str = "auto"
    shift: tuple = (2.5, -1.5)

    def validate(self):
        if self.command not in COMMANDS:
            raise ValueError(f"unknown command {self.command!r}")
        if self.labels < 2:
            raise ValueError("--labels must be at least 2")
        for name in ("iters", "size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"--{name} must be positive")
        for name in ("tol", "mu", "nu", "max_disp"):
            if getattr(self, name) <= 0:
                raise ValueError(f"--{name.replace('_', '-')} must be positive")
        if self.lam is not None and self.lam < 0:
            raise ValueError("--lambda must be nonnegative")
        if self.samples is not None and self.samples < self.labels:
            raise ValueError("--samples must be at least --labels")
        if self.step_ratio is not None and not self.step_ratio > 0:
            raise ValueError("--step-ratio must be positive")
        if self.label_scaling not in ("auto", "on", "off"):
            raise ValueError("--label-scaling must be auto, on or off")
        if self.mode not in ("sublabel", "baseline", "both"):
            raise ValueError("--mode must be sublabel, baseline or both")
        for p in self.inputs:
            if not Path(p).exists():
                raise FileNotFoundError(p)


COMMANDS = ("rof", "robust-rof", "flow", "adaptive")
DEFAULT_LAMBDA = {"rof": 0.2, "robust-rof": 0.2, "adaptive": 5.0}
DEFAULT_SAMPLES = {"flow": 33, "adaptive": 29}
# the adaptive label box spans 255 x 9: box coordinates and a long dual step
DEFAULT_STEP_RATIO = {"adaptive": 0.03}
LABEL_SCALING_COMMANDS = ("adaptive",)


def _build(cfg: RunConfig):
    """Inputs, problem and ground truth (or None) for a configuration."""
    rng = np.random.default_rng(cfg.seed)
    lam = cfg.lam if cfg.lam is not None else DEFAULT_LAMBDA.get(cfg.command)
    gt = None
    info = {}
    if cfg.command in ("rof", "robust-rof"):
        if cfg.inputs:
            img = load_image(cfg.inputs[0])
            info["input"] = str(cfg.inputs[0])
        else:
            vals = [[0.2, 0.3], [0.7, 0.25], [0.35, 0.8], [0.6, 0.65]]
            clean, _ = piecewise_constant_image((cfg.size, cfg.size), vals)
            img = np.clip(clean + 0.1 * rng.standard_normal(clean.shape), 0.0, 1.0)
            gt = clean
            info["generator"] = "piecewise_constant_image, 2x2 regions, noise 0.1"
        img3 = img[..., None] if img.ndim == 2 else img
        n = img3.shape[2]
        tri = build_uniform_triangulation([(0.0, 1.0)] * n, [cfg.labels] * n)
        if cfg.command == "rof":
            prob = rof_problem(img3, lam, tri)
        else:
            prob = robust_rof_problem(img3, lam, cfg.nu, tri)
        data = img3
    elif cfg.command == "flow":
        if len(cfg.inputs) >= 2:
            I1 = load_image(cfg.inputs[0])
            I2 = load_image(cfg.inputs[1])
            I1 = I1.mean(axis=2) if I1.ndim == 3 else I1
            I2 = I2.mean(axis=2) if I2.ndim == 3 else I2
            if len(cfg.inputs) >= 3:
                gt = load_flow(cfg.inputs[2]).astype(float)
            info["input"] = [str(p) for p in cfg.inputs]
        else:
            I1, I2, gt = shifted_texture_pair((cfg.size, cfg.size), cfg.shift, rng=rng)
            info["generator"] = f"shifted_texture_pair, shift {list(cfg.shift)}"
        samples = cfg.samples or DEFAULT_SAMPLES["flow"]
        prob = flow_problem(I1, I2, cfg.max_disp, samples_per_dim=samples, mu=cfg.mu, labels_per_dim=cfg.labels)
        info["samples"] = samples
        data = I1
    else:
        if cfg.inputs:
            img = load_image(cfg.inputs[0])
            img = (img.mean(axis=2) if img.ndim == 3 else img) * 255.0
            info["input"] = str(cfg.inputs[0])
        else:
            img = gaussian_noise_image((cfg.size, cfg.size), 128.0, 5.0, rng=rng)
            gt = np.stack([np.full(img.shape, 128.0), np.full(img.shape, 5.0)], axis=-1)
            info["generator"] = "gaussian_noise_image, mean 128, std 5"
        samples = cfg.samples or DEFAULT_SAMPLES["adaptive"]
        prob = adaptive_denoising_problem(img, lam, samples_per_dim=samples, labels_per_dim=cfg.labels)
        info["samples"] = samples
        data = img
    info["lambda"] = prob.meta.get("lambda", lam)
    return prob, data, gt, info


def _write_result(cfg, prob, result, outdir: Path, gt):
    outdir.mkdir(parents=True, exist_ok=True)
    labels = result.labels
    summary = {}
    if cfg.command in ("rof", "robust-rof"):
        save_image(labels, outdir / "result.png")
        np.save(outdir / "result.npy", labels)
    elif cfg.command == "flow":
        save_flow(labels, outdir / "flow.flo", outdir / "flow.png")
        if gt is not None:
            epe = float(np.mean(np.linalg.norm(labels - gt, axis=-1)))
            summary["epe"] = epe
    else:
        save_image(labels[..., 0] / 255.0, outdir / "mean.png")
        lo, hi = prob.tri.lower[1], prob.tri.upper[1]
        save_image((labels[..., 1] - lo) / (hi - lo), outdir / "std.png")
        np.save(outdir / "result.npy", labels)
        summary["mean_of_mean"] = float(labels[..., 0].mean())
        summary["mean_of_std"] = float(labels[..., 1].mean())
    write_diagnostics(result.diagnostics, outdir / "energy.csv")
    return summary


def run(cfg: RunConfig) -> int:
    """Execute one configuration; returns a process exit code."""
    stage = "config"
    try:
        cfg.validate()
        try:
            workers = int(os.environ.get(WORKERS_ENV, "1"))
        except ValueError:
            raise ValueError(f"{WORKERS_ENV} must be a positive integer") from None
        stage = "setup"
        _set_workers(workers)
        prob, data, gt, info = _build(cfg)
        ratio = cfg.step_ratio if cfg.step_ratio is not None else DEFAULT_STEP_RATIO.get(cfg.command, 1.0)
        scaling = cfg.label_scaling == "on" or (cfg.label_scaling == "auto" and cfg.command in LABEL_SCALING_COMMANDS)
        solver_cfg = SolverConfig(max_iterations=cfg.iters, tol=cfg.tol, seed=cfg.seed,
                                  preconditioning=cfg.preconditioning, step_ratio=ratio, label_scaling=scaling)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        variants = {"sublabel": [("sublabel", prob)],
                    "baseline": [("baseline", baseline_problem(prob))],
                    "both": [("sublabel", prob), ("baseline", baseline_problem(prob))]}[cfg.mode]
        manifest = {
            "version": __version__,
            "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(cfg).items()},
            "workers": workers,
            "workers_env": WORKERS_ENV,
            "solver": solver_cfg.to_dict(),
            "problem": dict(prob.meta, **info),
            "triangulation": {"vertices": prob.tri.n_vertices, "simplices": prob.tri.n_simplices,
                              "scheme": "uniform grid, Kuhn split"},
            "gradient": "forward differences, Neumann boundary",
            "results": {},
        }
        for name, p in variants:
            stage = f"solve:{name}"
            result = solve(p, solver_cfg)
            stage = f"write:{name}"
            sub = out / name if len(variants) > 1 else out
            summary = _write_result(cfg, p, result, sub, gt)
            entry = {"iterations": result.iterations, "converged": result.converged,
                     "energy": result.energy, "step_sizes": result.step_sizes, **summary}
            manifest["results"][name] = entry
            line = f"{name}: iterations={result.iterations} unlifted_energy={result.energy['unlifted_energy']:.6g}"
            if "epe" in summary:
                line += f" EPE={summary['epe']:.4f}"
            print(line)
        stage = "write:manifest"
        with open(out / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
        return 0
    except SolverDivergence as exc:
        print(f"error [{stage}]: solver diverged: {exc}", file=sys.stderr)
        return 4
    except ProjectionError as exc:
        print(f"error [{stage}]: projection failed: {exc}", file=sys.stderr)
        return 4
    except (OSError, FileNotFoundError) as exc:
        print(f"error [{stage}]: I/O failure: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error [{stage}]: {exc}", file=sys.stderr)
        return 2


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj))


def _set_workers(workers):
    # the kernels are single-threaded; the count is validated and recorded
    if workers < 1:
        raise ValueError(f"{WORKERS_ENV} must be a positive integer")
    return workers


def build_parser():
    ap = argparse.ArgumentParser(prog="sublift", description="Sublabel-accurate lifted labeling problems.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--input", nargs="*", default=[], help="input image(s); flow takes I1 I2 [gt.flo]")
        p.add_argument("--out", default=f"out/{name}")
        p.add_argument("--labels", type=int, default=5 if name == "flow" else 3, help="labels per dimension")
        p.add_argument("--samples", type=int, default=None, help="sublabel samples per dimension")
        p.add_argument("--lambda", dest="lam", type=float, default=None)
        p.add_argument("--mu", type=float, default=0.5, help="flow regularization scale")
        p.add_argument("--nu", type=float, default=0.05, help="truncation level")
        p.add_argument("--max-disp", dest="max_disp", type=float, default=4.0)
        p.add_argument("--iters", type=int, default=10000)
        p.add_argument("--tol", type=float, default=1e-6)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--size", type=int, default=32, help="synthetic image size")
        p.add_argument("--mode", default="sublabel", choices=["sublabel", "baseline", "both"])
        p.add_argument("--precondition", dest="preconditioning", action="store_true")
        p.add_argument("--step-ratio", dest="step_ratio", type=float, default=None,
                       help="primal over dual step factor (default 0.03 for adaptive, else 1)")
        p.add_argument("--label-scaling", dest="label_scaling", default="auto", choices=["auto", "on", "off"],
                       help="box coordinates for dataterm dual slopes (auto: adaptive only)")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    cfg = RunConfig(
        command=args.command,
        inputs=args.input,
        out=args.out,
        labels=args.labels,
        samples=args.samples,
        lam=args.lam,
        mu=args.mu,
        nu=args.nu,
        max_disp=args.max_disp,
        iters=args.iters,
        tol=args.tol,
        seed=args.seed,
        mode=args.mode,
        size=args.size,
        preconditioning=args.preconditioning,
        step_ratio=args.step_ratio,
        label_scaling=args.label_scaling,
    )
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
