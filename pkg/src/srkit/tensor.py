"""Dense NCHW tensors and the numeric primitives everything else builds on.

All data is 32-bit float, row-major batch/channel/height/width, accumulated
in 32-bit. Convolution is cross-correlation (no kernel flip) with zero
padding and stride 1, the convention of the mainstream DL frameworks, so
exported weights drop in unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when an operand's shape violates an operation's contract."""


def _as_f32(values, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=np.float32)
    if not np.isfinite(arr).all() and arr.size:
        # Non-finite weights/activations are always a bug upstream.
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class Tensor:
    """Immutable rank-4 float32 array in (n, c, h, w) layout.

    Takes ownership of `data`: the array (or its float32 contiguous copy) is
    marked read-only, so tensors are safe to share across threads.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be rank 4 (n,c,h,w), got rank {arr.ndim}")
        if min(arr.shape) < 1:
            raise ShapeError(f"tensor extents must all be >= 1, got {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def numel(self) -> int:
        return self.data.size

    @staticmethod
    def zeros(n: int, c: int, h: int, w: int) -> "Tensor":
        return Tensor(np.zeros((n, c, h, w), dtype=np.float32))

    @staticmethod
    def full(n: int, c: int, h: int, w: int, value: float) -> "Tensor":
        return Tensor(np.full((n, c, h, w), value, dtype=np.float32))


def tensor(values) -> Tensor:
    """Build a Tensor from any nested sequence / ndarray of rank 4 (copies)."""
    return Tensor(np.array(values, dtype=np.float32))


@dataclass(frozen=True)
class ConvSpec:
    """One convolution layer: geometry plus its weights.

    weight has shape (out_channels, in_channels // groups, kh, kw); bias, when
    present, one value per output channel.
    """

    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    padding: tuple[int, int]
    weight: np.ndarray
    bias: np.ndarray | None = None
    groups: int = 1

    def __post_init__(self) -> None:
        if self.groups < 1:
            raise ShapeError(f"groups must be >= 1, got {self.groups}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"channels ({self.in_channels}->{self.out_channels}) not divisible "
                f"by groups={self.groups}"
            )
        kh, kw = self.kernel
        if kh < 1 or kw < 1:
            raise ShapeError(f"kernel extents must be >= 1, got {self.kernel}")
        if min(self.padding) < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")
        want = (self.out_channels, self.in_channels // self.groups, kh, kw)
        w = _as_f32(self.weight, "weight")
        if w.shape != want:
            raise ShapeError(f"weight shape {w.shape} != expected {want}")
        w.flags.writeable = False
        object.__setattr__(self, "weight", w)
        if self.bias is not None:
            b = _as_f32(self.bias, "bias")
            if b.shape != (self.out_channels,):
                raise ShapeError(
                    f"bias shape {b.shape} != ({self.out_channels},) (out_channels)"
                )
            b.flags.writeable = False
            object.__setattr__(self, "bias", b)

    @property
    def param_count(self) -> int:
        return self.weight.size + (self.bias.size if self.bias is not None else 0)

    @staticmethod
    def identity(channels: int) -> "ConvSpec":
        w = np.eye(channels, dtype=np.float32).reshape(channels, channels, 1, 1)
        return ConvSpec(channels, channels, (1, 1), (0, 0), w)


def conv2d(x: Tensor, spec: ConvSpec) -> Tensor:
    """Cross-correlate x with spec's kernel (zero padding, stride 1).

    Output spatial extents are h + 2*ph - kh + 1 by w + 2*pw - kw + 1.
    """
    if x.c != spec.in_channels:
        raise ShapeError(
            f"conv2d: input has {x.c} channels, spec expects {spec.in_channels}"
        )
    n, _, h, w = x.shape
    kh, kw = spec.kernel
    ph, pw = spec.padding
    hout = h + 2 * ph - kh + 1
    wout = w + 2 * pw - kw + 1
    if hout < 1 or wout < 1:
        raise ShapeError(
            f"conv2d: kernel {spec.kernel} does not fit padded input {h}x{w} "
            f"(pad {spec.padding})"
        )
    padded = x.data
    if ph or pw:
        padded = np.pad(padded, ((0, 0), (0, 0), (ph, ph), (pw, pw)))

    if spec.in_channels == spec.groups:
        out = _conv_depthwise(padded, spec, n, hout, wout)
    else:
        out = _conv_grouped(padded, spec, n, hout, wout)

    if spec.bias is not None:
        out += spec.bias[None, :, None, None]
    return Tensor(out)


def _conv_depthwise(padded: np.ndarray, spec: ConvSpec, n: int, hout: int, wout: int) -> np.ndarray:
    # One input channel per group; each output channel reads exactly one
    # input channel, so a tap-by-tap accumulation beats im2col here.
    kh, kw = spec.kernel
    mult = spec.out_channels // spec.groups
    src = padded[:, np.repeat(np.arange(spec.in_channels), mult)]
    out = np.zeros((n, spec.out_channels, hout, wout), dtype=np.float32)
    w = spec.weight[:, 0]
    for dy in range(kh):
        for dx in range(kw):
            out += w[None, :, dy, dx, None, None] * src[:, :, dy : dy + hout, dx : dx + wout]
    return out


def _conv_grouped(padded: np.ndarray, spec: ConvSpec, n: int, hout: int, wout: int) -> np.ndarray:
    kh, kw = spec.kernel
    cg = spec.in_channels // spec.groups
    og = spec.out_channels // spec.groups
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    out = np.empty((n, spec.out_channels, hout, wout), dtype=np.float32)
    for g in range(spec.groups):
        cols = (
            windows[:, g * cg : (g + 1) * cg]
            .transpose(0, 2, 3, 1, 4, 5)
            .reshape(n, hout * wout, cg * kh * kw)
        )
        wmat = spec.weight[g * og : (g + 1) * og].reshape(og, cg * kh * kw)
        prod = cols @ wmat.T  # float32 GEMM
        out[:, g * og : (g + 1) * og] = prod.transpose(0, 2, 1).reshape(n, og, hout, wout)
    return out


def relu(x: Tensor) -> Tensor:
    return Tensor(np.maximum(x.data, 0.0))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return Tensor(a.data + b.data)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; b may also be a per-channel (1, c, 1, 1) operand."""
    if a.shape != b.shape:
        broadcast = b.n == 1 and b.h == 1 and b.w == 1 and b.c == a.c
        if not broadcast:
            raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return Tensor(a.data * b.data)


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    """Rearrange s*s channel groups into s x s spatial blocks (depth-to-space).

    Channel c*s*s + k lands at offset (k // s, k % s) inside each block; this
    ordering is what makes a center-tap depthwise kernel followed by the
    shuffle reproduce nearest-neighbor upsampling exactly.
    """
    if s < 1:
        raise ShapeError(f"pixel_shuffle: upscale factor must be >= 1, got {s}")
    if s == 1:
        return x
    n, c, h, w = x.shape
    if c % (s * s):
        raise ShapeError(f"pixel_shuffle: {c} channels not divisible by s^2={s * s}")
    co = c // (s * s)
    d = x.data.reshape(n, co, s, s, h, w)
    out = d.transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * s, w * s)
    return Tensor(out)


def space_to_depth(x: Tensor, s: int) -> Tensor:
    """Inverse of pixel_shuffle: fold s x s spatial blocks into channels."""
    if s < 1:
        raise ShapeError(f"space_to_depth: factor must be >= 1, got {s}")
    if s == 1:
        return x
    n, c, h, w = x.shape
    if h % s or w % s:
        raise ShapeError(f"space_to_depth: spatial {h}x{w} not divisible by s={s}")
    d = x.data.reshape(n, c, h // s, s, w // s, s)
    out = d.transpose(0, 1, 3, 5, 2, 4).reshape(n, c * s * s, h // s, w // s)
    return Tensor(out)


def concat_channels(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels: need at least one tensor")
    n, _, h, w = parts[0].shape
    for i, p in enumerate(parts[1:], start=1):
        if (p.n, p.h, p.w) != (n, h, w):
            raise ShapeError(
                f"concat_channels: part {i} has (n,h,w)=({p.n},{p.h},{p.w}), "
                f"expected ({n},{h},{w})"
            )
    return Tensor(np.concatenate([p.data for p in parts], axis=1))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.c):
        raise ShapeError(f"slice_channels: [{start}:{stop}] out of range for {x.c} channels")
    return Tensor(x.data[:, start:stop])
