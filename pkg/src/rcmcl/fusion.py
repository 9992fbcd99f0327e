"""Adaptive modality gating and normalized weighted feature fusion.

Each modality gets a scalar reliability gate, a sigmoid of an affine score
of its encoder feature.  Fusion is the gate-weighted average of the three
features, which is invariant to rescaling all gates; if every gate
collapses below a small threshold the fused feature falls back to the
unweighted mean of the available modalities and the output is flagged
degenerate.

Pipeline convention: callers unit-normalize each feature row before
gating and fusing (the `gate` and `fuse` operators themselves are
convention-free).  On the unit sphere a degraded stream cannot hide at
small magnitude — its direction contaminates the weighted average until
its gate learns to suppress it, which is what makes the gates responsive
to dropped streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import MODALITIES
from .linalg import ShapeError, l2_normalize_rows, sigmoid_forward
from .model import ENCODERS

GATE_EPS = 1e-6


@dataclass
class GateOutput:
    """Per-sample gate values in (0, 1) plus the normalized fusion weights."""

    g_r: float
    g_s: float
    g_p: float
    degenerate: bool

    @property
    def weights(self):
        g = np.array([self.g_r, self.g_s, self.g_p])
        total = g.sum()
        if self.degenerate or total < GATE_EPS:
            return np.full(3, 1.0 / 3.0)
        return g / total


def gate(z: np.ndarray, gate_w: np.ndarray, gate_b: float):
    """Sigmoid of the affine gate score.  z: (n, d_f) -> (n,).

    Returns (g, cache) with the cache needed for gate_backward.
    """
    z = np.asarray(z, dtype=np.float64)
    gate_w = np.asarray(gate_w, dtype=np.float64).reshape(-1)
    if z.shape[1] != gate_w.shape[0]:
        raise ShapeError(f"gate dim mismatch: z {z.shape} vs w {gate_w.shape}")
    s = z @ gate_w + gate_b
    g, _ = sigmoid_forward(s[:, None])
    g = g[:, 0]
    return g, (z, gate_w, g)


def gate_backward(dg: np.ndarray, cache):
    """Returns (dz, dw, db) for one modality's gate."""
    z, w, g = cache
    ds = dg * g * (1.0 - g)
    dz = ds[:, None] * w[None, :]
    dw = z.T @ ds
    db = ds.sum()
    return dz, dw, db


def fuse(z_r, z_s, z_p, gates, eps: float = GATE_EPS, availability=None,
         force_equal: bool = False):
    """Gate-weighted average of the three modality features.

    gates: (n, 3) array in (r, s, p) order.  Returns (z_fusion, cache).
    When the per-sample gate sum falls below eps, the sample falls back to
    the unweighted mean of its available modalities (all three if no
    availability is given) and is marked degenerate in the cache.
    force_equal replaces the gates with ones (plain average fusion).
    """
    zs = [np.asarray(z, dtype=np.float64) for z in (z_r, z_s, z_p)]
    n, d_f = zs[0].shape
    for z in zs[1:]:
        if z.shape != (n, d_f):
            raise ShapeError(f"fuse feature shape mismatch: {z.shape} vs {(n, d_f)}")
    gates = np.asarray(gates, dtype=np.float64)
    if force_equal:
        gates = np.ones((n, 3))
    if gates.shape != (n, 3):
        raise ShapeError(f"gates must be (n, 3), got {gates.shape}")
    stack = np.stack(zs, axis=1)                       # (n, 3, d_f)
    den = gates.sum(axis=1)
    degenerate = den < eps
    num = np.einsum("nm,nmd->nd", gates, stack)
    safe_den = np.where(degenerate, 1.0, den)
    z_fusion = num / safe_den[:, None]
    if np.any(degenerate):
        if availability is None:
            avail = np.ones((n, 3), dtype=bool)
        else:
            avail = np.asarray(availability, dtype=bool)
        counts = np.maximum(avail.sum(axis=1), 1)
        mean = np.einsum("nm,nmd->nd", avail.astype(np.float64), stack)
        mean /= counts[:, None]
        z_fusion = np.where(degenerate[:, None], mean, z_fusion)
    cache = (stack, gates, safe_den, z_fusion, degenerate,
             availability if availability is not None else np.ones((n, 3), dtype=bool))
    return z_fusion, cache


def fuse_backward(dz_fusion: np.ndarray, cache):
    """Returns ([dz_r, dz_s, dz_p], dgates).

    Degenerate samples used the availability-mean fallback, which is
    constant in the gates; their gate gradient is zero.
    """
    stack, gates, safe_den, z_fusion, degenerate, avail = cache
    n = stack.shape[0]
    inv = 1.0 / safe_den
    dstack = gates[:, :, None] * dz_fusion[:, None, :] * inv[:, None, None]
    dgates = np.einsum("nd,nmd->nm", dz_fusion, stack - z_fusion[:, None, :])
    dgates *= inv[:, None]
    if np.any(degenerate):
        counts = np.maximum(avail.sum(axis=1), 1).astype(np.float64)
        fallback = (avail.astype(np.float64) / counts[:, None])[:, :, None] \
            * dz_fusion[:, None, :]
        dstack = np.where(degenerate[:, None, None], fallback, dstack)
        dgates = np.where(degenerate[:, None], 0.0, dgates)
    return [dstack[:, 0], dstack[:, 1], dstack[:, 2]], dgates


def gates_forward(z_r, z_s, z_p, params):
    """Compute the (n, 3) gate matrix from encoder features."""
    out = np.empty((z_r.shape[0], 3))
    caches = []
    for col, z in enumerate((z_r, z_s, z_p)):
        g, cache = gate(z, params.gate_w[col], params.gate_b[col])
        out[:, col] = g
        caches.append(cache)
    return out, caches


def gates_backward(dgates: np.ndarray, caches):
    """Returns ([dz_r, dz_s, dz_p], dgate_w (3, d_f), dgate_b (3,))."""
    dzs = []
    dW = np.zeros((3, caches[0][1].shape[0]))
    db = np.zeros(3)
    for col, cache in enumerate(caches):
        dz, dw, dbi = gate_backward(dgates[:, col], cache)
        dzs.append(dz)
        dW[col] = dw
        db[col] = dbi
    return dzs, dW, db


def gate_trace(sample, params, window_len: int, stride: int):
    """Gates per sliding temporal window of one sample.

    sample is a Dataset of length 1 (or any dataset; the first sample is
    used).  Each window is encoded independently; returns a list of
    (window_start, GateOutput).
    """
    if window_len < 1:
        raise ValueError("window_len must be >= 1")
    T = params.dims.frames
    src_T = sample.rgbd.shape[1]
    if window_len > src_T:
        raise ValueError(f"window_len {window_len} exceeds sequence length {src_T}")
    rows = []
    for start in range(0, src_T - window_len + 1, max(stride, 1)):
        window = slice(start, start + window_len)
        # pad/tile the window back to the encoder's expected frame count
        reps = int(np.ceil(T / window_len))
        idx = np.tile(np.arange(start, start + window_len), reps)[:T]
        z_r = l2_normalize_rows(ENCODERS["r"][0](sample.rgbd[:1, idx], params)[0])[0]
        z_s = l2_normalize_rows(ENCODERS["s"][0](sample.skeleton[:1, idx], params)[0])[0]
        z_p = l2_normalize_rows(ENCODERS["p"][0](sample.points[:1, idx], params)[0])[0]
        gates, _ = gates_forward(z_r, z_s, z_p, params)
        degenerate = bool(gates.sum() < GATE_EPS)
        rows.append((start, GateOutput(float(gates[0, 0]), float(gates[0, 1]),
                                       float(gates[0, 2]), degenerate)))
    return rows


def gate_trace_csv(rows) -> str:
    lines = ["window_start,g_r,g_s,g_p,degenerate"]
    for start, g in rows:
        lines.append(f"{start},{g.g_r:.10g},{g.g_s:.10g},{g.g_p:.10g},"
                     f"{int(g.degenerate)}")
    return "\n".join(lines) + "\n"
