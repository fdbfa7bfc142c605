"""Standalone numeric routines: Haar DWT, entropy gate, Newton-Schulz, affinity.

These back the surrounding toolkit but have no dependency on the model graph;
all are pure functions, safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor

ENTROPY_EPS = 1e-8

# Quintic odd-polynomial coefficients of the orthogonalization iteration;
# chosen upstream to maximize slope at zero, so phi does not fix 1 but
# drives singular values into a band around it.
NS_A = 3.4445
NS_B = -4.7750
NS_C = 2.0315
NS_STEPS = 5


@dataclass(frozen=True)
class WaveletSubbands:
    """One analysis level: low-pass ll and detail subbands hl, lh, hh."""

    ll: Tensor
    hl: Tensor
    lh: Tensor
    hh: Tensor


def haar_dwt(x: Tensor) -> WaveletSubbands:
    """Orthonormal 2D Haar analysis over non-overlapping 2x2 blocks.

    With a = top-left, b = top-right, c = bottom-left, d = bottom-right:
    ll=(a+b+c+d)/2, hl=(a-b+c-d)/2, lh=(a+b-c-d)/2, hh=(a-b-c+d)/2.
    The 1/2 normalization makes analysis/synthesis orthonormal, so energy is
    preserved across subbands (Parseval).
    """
    if x.h % 2 or x.w % 2:
        raise ShapeError(f"haar_dwt: spatial extents must be even, got {x.h}x{x.w}")
    d = x.data
    a = d[:, :, 0::2, 0::2]
    b = d[:, :, 0::2, 1::2]
    c = d[:, :, 1::2, 0::2]
    e = d[:, :, 1::2, 1::2]
    return WaveletSubbands(
        ll=Tensor((a + b + c + e) * 0.5),
        hl=Tensor((a - b + c - e) * 0.5),
        lh=Tensor((a + b - c - e) * 0.5),
        hh=Tensor((a - b - c + e) * 0.5),
    )


def haar_idwt(sb: WaveletSubbands) -> Tensor:
    """Inverse of haar_dwt (the analysis matrix is its own inverse)."""
    ll, hl, lh, hh = sb.ll.data, sb.hl.data, sb.lh.data, sb.hh.data
    if not (ll.shape == hl.shape == lh.shape == hh.shape):
        raise ShapeError("haar_idwt: subbands must share one shape")
    n, c, h, w = ll.shape
    out = np.empty((n, c, h * 2, w * 2), dtype=np.float32)
    out[:, :, 0::2, 0::2] = (ll + hl + lh + hh) * 0.5
    out[:, :, 0::2, 1::2] = (ll - hl + lh - hh) * 0.5
    out[:, :, 1::2, 0::2] = (ll + hl - lh - hh) * 0.5
    out[:, :, 1::2, 1::2] = (ll - hl - lh + hh) * 0.5
    return Tensor(out)


def entropy_attention(x: Tensor, eps: float = ENTROPY_EPS) -> np.ndarray:
    """Per-(sample, channel) Gaussian differential entropy of the feature map.

    H = 0.5 * ln(2*pi*sigma^2) with sigma^2 the spatial variance, floored at
    eps so constant channels stay finite. Returned raw, before any squashing.
    """
    if x.h * x.w < 2:
        raise ShapeError("entropy_attention: need at least two spatial positions")
    var = x.data.astype(np.float64).var(axis=(2, 3))
    return 0.5 * np.log(2.0 * np.pi * np.maximum(var, eps))


def frobenius_normalize(x: np.ndarray, eps: float = 1e-7) -> np.ndarray:
    """Scale a matrix to unit Frobenius norm (spectral norm then <= 1)."""
    x = np.asarray(x, dtype=np.float32)
    return x / (np.linalg.norm(x) + eps)


def newton_schulz(x: np.ndarray, steps: int = NS_STEPS) -> np.ndarray:
    """Iterate X <- a X + (b A + c A^2) X with A = X X^T.

    Acts as the scalar quintic phi(s) = a s + b s^3 + c s^5 on each singular
    value while leaving singular vectors fixed. The caller pre-normalizes
    (e.g. frobenius_normalize) so singular values start within the quintic's
    working interval.
    """
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise ShapeError(f"newton_schulz: expected a matrix, got rank {x.ndim}")
    if not np.isfinite(x).all():
        raise ValueError("newton_schulz: input has non-finite entries")
    for _ in range(steps):
        a = x @ x.T
        x = NS_A * x + (NS_B * a + NS_C * (a @ a)) @ x
    return x


def ns_scalar(s: float, steps: int = NS_STEPS) -> float:
    """The singular-value action of newton_schulz, for oracle checks."""
    for _ in range(steps):
        s = NS_A * s + NS_B * s**3 + NS_C * s**5
    return s


def spatial_affinity(x: Tensor) -> np.ndarray:
    """Per-sample normalized Gram matrix over spatial positions.

    Features reshape to (c, h*w); each spatial column is L2-normalized, and
    the affinity is the (h*w, h*w) Gram of the normalized columns, one matrix
    per sample. Positive rescaling of the features cancels out.
    """
    n, c, h, w = x.shape
    feats = x.data.reshape(n, c, h * w).astype(np.float64)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    feats = feats / np.maximum(norms, 1e-12)
    return np.einsum("ncp,ncq->npq", feats, feats)


def affinity_loss(student: list[Tensor], teacher: list[Tensor]) -> float:
    """Mean (over layers) of mean absolute affinity difference.

    Layer pairs must agree in batch and spatial extents; channel widths may
    differ, which is the point: the affinity compares spatial structure, not
    channels.
    """
    if len(student) != len(teacher):
        raise ShapeError(
            f"affinity_loss: {len(student)} student layers vs {len(teacher)} teacher"
        )
    if not student:
        raise ShapeError("affinity_loss: need at least one layer pair")
    total = 0.0
    for i, (s, t) in enumerate(zip(student, teacher)):
        if (s.n, s.h, s.w) != (t.n, t.h, t.w):
            raise ShapeError(
                f"affinity_loss: layer {i} extents (n,h,w) differ: "
                f"({s.n},{s.h},{s.w}) vs ({t.n},{t.h},{t.w})"
            )
        total += float(np.abs(spatial_affinity(s) - spatial_affinity(t)).mean())
    return total / len(student)
