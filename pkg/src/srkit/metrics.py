"""Measurement protocol: PSNR with border discard, complexity counts, timing.

Conventions pinned here:
* PSNR runs on 8-bit RGB after rounding/clamping, discards a fixed border on
  every side, and caps identical images at 100 dB.
* FLOPs count one per multiply-accumulate, plus one per bias add and one per
  elementwise op; this is the convention under which the reference models'
  published G-counts reproduce.
* Runtime numbers are machine-relative and never part of hard acceptance.
"""

from __future__ import annotations

import statistics
import time
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np

from .fusion import TrafficCounter
from .graph import ModelGraph, Node, run_graph
from .tensor import Tensor

PSNR_CAP_DB = 100.0


def psnr(pred: np.ndarray, gt: np.ndarray, border: int = 4) -> float:
    """Peak signal-to-noise ratio between 8-bit RGB images, in decibels.

    `border` pixels are discarded on each side before the MSE; identical
    crops return the 100 dB cap.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"psnr: image shapes differ: {pred.shape} vs {gt.shape}")
    if pred.ndim != 3 or pred.shape[2] != 3:
        raise ValueError(f"psnr: expected (h, w, 3) images, got {pred.shape}")
    if border < 0:
        raise ValueError(f"psnr: border must be >= 0, got {border}")
    h, w, _ = pred.shape
    if h <= 2 * border or w <= 2 * border:
        raise ValueError(
            f"psnr: image {h}x{w} smaller than 2*border+1 = {2 * border + 1}"
        )
    if border:
        pred = pred[border:-border, border:-border]
        gt = gt[border:-border, border:-border]
    diff = pred.astype(np.float64) - gt.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(255.0**2 / mse))


def image_to_tensor(img: np.ndarray) -> Tensor:
    """(h, w, 3) uint8 -> (1, 3, h, w) float in [0, 1]."""
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return Tensor(arr.transpose(2, 0, 1)[None])


def tensor_to_image(t: Tensor) -> np.ndarray:
    """(1, 3, h, w) float in [0, 1] -> rounded, clamped (h, w, 3) uint8."""
    arr = np.clip(t.data[0], 0.0, 1.0) * 255.0
    return np.rint(arr).astype(np.uint8).transpose(1, 2, 0)


# --------------------------------------------------------------------------
# complexity counting


def _node_params(n: Node) -> int:
    if n.op != "conv":
        return 0
    total = 0
    if n.spec is not None:
        total += n.spec.param_count
    if n.lora is not None:
        total += n.lora.a.size + n.lora.b.size
    if n.branches is not None:
        total += sum(b.param_count for b in n.branches.branches)
    return total


def count_params(g: ModelGraph) -> int:
    """Total weight and bias element count over all layers (live form)."""
    return sum(_node_params(n) for n in g.nodes)


def _conv_flops(spec, hout: int, wout: int) -> int:
    macs = spec.out_channels * (spec.in_channels // spec.groups)
    macs *= spec.kernel[0] * spec.kernel[1] * hout * wout
    bias = spec.out_channels * hout * wout if spec.bias is not None else 0
    return macs + bias


def count_flops(g: ModelGraph, h: int = 256, w: int = 256) -> int:
    """FLOPs for one (1, c, h, w) forward pass, one FLOP per MAC.

    Elementwise ops cost one per output element; concat and depth-to-space
    are free (pure data movement). Fusion changes memory traffic, never this
    count.
    """
    shapes: dict[str, tuple[int, int, int]] = {}
    total = 0
    for n in g.nodes:
        if n.op == "input":
            shapes[n.name] = (n.channels or 3, h, w)
        elif n.op == "conv":
            _, hin, win = shapes[n.inputs[0]]
            specs = (
                [b for b in n.branches.branches] if n.branches is not None else [n.spec]
            )
            hout = wout = None
            for spec in specs:
                hout = hin + 2 * spec.padding[0] - spec.kernel[0] + 1
                wout = win + 2 * spec.padding[1] - spec.kernel[1] + 1
                total += _conv_flops(spec, hout, wout)
            cout = specs[0].out_channels
            numel = cout * hout * wout
            if n.branches is not None:
                extra = len(specs) - 1 + (1 if n.branches.include_identity else 0)
                total += extra * numel  # summing the parallel branches
            if n.lora is not None:
                kh, kw = n.spec.kernel
                total += (
                    cout * n.spec.in_channels * kh * kw * hout * wout + numel
                )  # the live low-rank branch conv and the add
            shapes[n.name] = (cout, hout, wout)
        elif n.op in ("relu", "add", "mul"):
            c, hin, win = shapes[n.inputs[0]]
            total += c * hin * win
            shapes[n.name] = (c, hin, win)
        elif n.op == "concat":
            parts = [shapes[r] for r in n.inputs]
            shapes[n.name] = (sum(p[0] for p in parts), parts[0][1], parts[0][2])
        elif n.op == "pixel_shuffle":
            c, hin, win = shapes[n.inputs[0]]
            s = n.upscale or 1
            shapes[n.name] = (c // (s * s), hin * s, win * s)
    return total


# --------------------------------------------------------------------------
# runtime


@dataclass
class RuntimeStats:
    per_image_ms: list[float]
    mean_ms: float
    median_ms: float
    mode: str
    threads: int | None

    def to_dict(self) -> dict:
        return {
            "per_image_ms": self.per_image_ms,
            "mean_ms": self.mean_ms,
            "median_ms": self.median_ms,
            "mode": self.mode,
            "threads": self.threads,
        }


def _thread_limit(threads: int | None):
    if threads is None:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return nullcontext()
    return threadpool_limits(limits=threads)


def bench_runtime(
    g: ModelGraph,
    images: list[Tensor],
    warmup: int = 1,
    reps: int = 3,
    mode: str = "unfused",
    threads: int | None = 1,
) -> RuntimeStats:
    """Per-image wall-clock of running the graph, after discarded warmups.

    Each image's figure is the mean of `reps` timed runs. BLAS threading is
    pinned to `threads` when threadpoolctl is importable (single-threaded by
    default); timings are reported, never asserted.
    """
    if reps < 1:
        raise ValueError(f"bench_runtime: reps must be >= 1, got {reps}")
    if not images:
        raise ValueError("bench_runtime: empty image list")
    per_image: list[float] = []
    with _thread_limit(threads):
        for img in images:
            for _ in range(warmup):
                run_graph(g, img, mode=mode)
            times = []
            for _ in range(reps):
                t0 = time.perf_counter()
                run_graph(g, img, mode=mode)
                times.append((time.perf_counter() - t0) * 1000.0)
            per_image.append(statistics.mean(times))
    return RuntimeStats(
        per_image_ms=per_image,
        mean_ms=statistics.mean(per_image),
        median_ms=statistics.median(per_image),
        mode=mode,
        threads=threads,
    )


def average_set_runtimes(set_means_ms: list[float]) -> float:
    """The challenge's "Ave." column: plain mean of per-set mean runtimes."""
    if not set_means_ms:
        raise ValueError("average_set_runtimes: no set means given")
    return statistics.mean(set_means_ms)


@dataclass
class MetricsReport:
    """One model/run measurement bundle, JSON-serializable for the CLI."""

    psnr_db: list[float] = field(default_factory=list)
    params: int | None = None
    flops: int | None = None
    runtime: RuntimeStats | None = None
    traffic: TrafficCounter | None = None

    @property
    def psnr_mean(self) -> float | None:
        return statistics.mean(self.psnr_db) if self.psnr_db else None

    def to_dict(self) -> dict:
        out: dict = {}
        if self.psnr_db:
            out["psnr_db"] = self.psnr_db
            out["psnr_mean_db"] = self.psnr_mean
        if self.params is not None:
            out["params"] = self.params
            out["params_m"] = self.params / 1e6
        if self.flops is not None:
            out["flops"] = self.flops
            out["flops_g"] = self.flops / 1e9
        if self.runtime is not None:
            out["runtime"] = self.runtime.to_dict()
        if self.traffic is not None:
            out["traffic"] = {
                "element_reads": self.traffic.element_reads,
                "element_writes": self.traffic.element_writes,
            }
        return out
