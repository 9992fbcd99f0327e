"""Self-supervised and supervised objectives with analytic gradients.

Every loss returns its scalar value together with gradients w.r.t. its
direct inputs; upstream modules chain those through the encoder/head
backward passes.  All softmax-style terms are log-sum-exp stabilized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import (
    ShapeError,
    batch_standardize,
    batch_standardize_backward,
    l2_normalize_rows,
    l2_normalize_rows_backward,
)
from .fusion import fuse, fuse_backward, gates_backward, gates_forward
from .model import mlp_forward, project, project_backward


@dataclass(frozen=True)
class LossConfig:
    """Weights of the joint pre-training objective."""

    temperature: float = 0.07
    barlow_lambda: float = 5e-3     # off-diagonal weight inside the Barlow term
    lambda_cm: float = 1.0          # cross-modal contrastive
    lambda_im: float = 0.5          # intra-modal redundancy reduction
    lambda_deg: float = 0.2         # masked-skeleton reconstruction
    lambda_fuse: float = 0.5        # fused-to-modality alignment

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        for name in ("barlow_lambda", "lambda_cm", "lambda_im",
                     "lambda_deg", "lambda_fuse"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def _log_softmax(s: np.ndarray, axis: int):
    shifted = s - s.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def info_nce_pair(h_i: np.ndarray, h_j: np.ndarray, tau: float):
    """Symmetric temperature-scaled contrastive loss on unit-norm rows.

    Positives are the matching rows of the two batches; the denominator
    runs over every row of the other batch, including the positive itself.
    Returns (loss, dh_i, dh_j).
    """
    h_i = np.asarray(h_i, dtype=np.float64)
    h_j = np.asarray(h_j, dtype=np.float64)
    if h_i.shape != h_j.shape:
        raise ShapeError(f"info_nce shape mismatch: {h_i.shape} vs {h_j.shape}")
    for name, h in (("h_i", h_i), ("h_j", h_j)):
        norms = np.linalg.norm(h, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError(f"{name} rows must be unit-norm "
                             f"(max deviation {np.abs(norms - 1.0).max():.3g})")
    n = h_i.shape[0]
    s = (h_i @ h_j.T) / tau
    log_p_row = _log_softmax(s, axis=1)   # anchors from h_i
    log_p_col = _log_softmax(s, axis=0)   # anchors from h_j
    diag = np.arange(n)
    loss = -(log_p_row[diag, diag].sum() + log_p_col[diag, diag].sum()) / (2.0 * n)
    p_row = np.exp(log_p_row)
    p_col = np.exp(log_p_col)
    eye = np.eye(n)
    ds = ((p_row - eye) + (p_col - eye)) / (2.0 * n)
    dh_i = (ds @ h_j) / tau
    dh_j = (ds.T @ h_i) / tau
    return float(loss), dh_i, dh_j


def cross_modal_total(h_r: np.ndarray, h_s: np.ndarray, h_p: np.ndarray,
                      tau: float):
    """Sum of the three pairwise symmetric contrastive losses.

    Returns (loss, (dh_r, dh_s, dh_p)).
    """
    l_rs, d_r1, d_s1 = info_nce_pair(h_r, h_s, tau)
    l_rp, d_r2, d_p1 = info_nce_pair(h_r, h_p, tau)
    l_sp, d_s2, d_p2 = info_nce_pair(h_s, h_p, tau)
    return (l_rs + l_rp + l_sp,
            (d_r1 + d_r2, d_s1 + d_s2, d_p1 + d_p2))


def barlow_loss(h1: np.ndarray, h2: np.ndarray, lam: float):
    """Cross-correlation objective between two views' embeddings.

    Columns of each view are standardized over the batch; the loss pulls
    the diagonal of the cross-correlation toward 1 and the off-diagonal
    toward 0.  Returns (loss, dh1, dh2).
    """
    h1 = np.asarray(h1, dtype=np.float64)
    h2 = np.asarray(h2, dtype=np.float64)
    if h1.shape != h2.shape:
        raise ShapeError(f"barlow shape mismatch: {h1.shape} vs {h2.shape}")
    n = h1.shape[0]
    z1, c1 = batch_standardize(h1)
    z2, c2 = batch_standardize(h2)
    corr = (z1.T @ z2) / n
    d = corr.shape[0]
    diag = np.arange(d)
    inv = corr[diag, diag] - 1.0
    off = corr.copy()
    off[diag, diag] = 0.0
    loss = float((inv ** 2).sum() + lam * (off ** 2).sum())
    dcorr = 2.0 * lam * off
    dcorr[diag, diag] = 2.0 * inv
    dz1 = (z2 @ dcorr.T) / n
    dz2 = (z1 @ dcorr) / n
    return loss, batch_standardize_backward(dz1, c1), batch_standardize_backward(dz2, c2)


def degradation_loss(recon: np.ndarray, target: np.ndarray):
    """Mean squared error over every coordinate.  Returns (loss, drecon)."""
    recon = np.asarray(recon, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if recon.shape != target.shape:
        raise ShapeError(f"reconstruction shape {recon.shape} != "
                         f"target {target.shape}")
    diff = recon - target
    loss = float((diff ** 2).mean())
    return loss, (2.0 / diff.size) * diff


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log softmax probability of the true class.

    Returns (loss, dlogits).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    log_p = _log_softmax(logits, axis=1)
    idx = np.arange(n)
    loss = float(-log_p[idx, labels].mean())
    dlogits = np.exp(log_p)
    dlogits[idx, labels] -= 1.0
    return loss, dlogits / n


@dataclass
class FusionLossGrads:
    """Gradient bundle of the fused-to-modality alignment loss."""

    dz: list              # [dz_r, dz_s, dz_p] w.r.t. the (possibly corrupted) features
    dh: list              # [dh_r, dh_s, dh_p] w.r.t. the clean modality embeddings
    dgate_w: np.ndarray
    dgate_b: np.ndarray
    dproj_f: list         # per-layer (dw, db) of the fusion projection head


def fusion_alignment_loss(z_r, z_s, z_p, params, h_r, h_s, h_p, tau,
                          availability=None, force_equal_gates: bool = False):
    """Align the gated fusion of the features to each modality embedding.

    The features (typically encoded from a partially corrupted batch copy)
    are unit-normalized per row, gated, fused, and projected through the
    fusion head; the loss is the sum of the symmetric contrastive losses
    between the fused embedding and each clean modality embedding, so the
    gate parameters learn to discount unreliable streams.  Normalizing
    before gating and fusion means a degraded stream cannot shrink its way
    out of the weighted average — its direction stays in the mix at full
    magnitude until its gate suppresses it.  Returns
    (loss, FusionLossGrads).
    """
    zn, n_caches = [], []
    for z in (z_r, z_s, z_p):
        z_hat, nc = l2_normalize_rows(z)
        zn.append(z_hat)
        n_caches.append(nc)
    gates, gate_caches = gates_forward(zn[0], zn[1], zn[2], params)
    z_fusion, fuse_cache = fuse(zn[0], zn[1], zn[2], gates,
                                availability=availability,
                                force_equal=force_equal_gates)
    h_f, proj_cache = project(z_fusion, params.proj_f)

    loss = 0.0
    dh_f = np.zeros_like(h_f)
    dh = []
    for h_m in (h_r, h_s, h_p):
        l_m, d_f, d_m = info_nce_pair(h_f, h_m, tau)
        loss += l_m
        dh_f += d_f
        dh.append(d_m)

    dz_fusion, dproj_f = project_backward(dh_f, params.proj_f, proj_cache)
    dz_list, dgates = fuse_backward(dz_fusion, fuse_cache)
    if force_equal_gates:
        dgate_w = np.zeros_like(params.gate_w)
        dgate_b = np.zeros_like(params.gate_b)
    else:
        dz_gate, dgate_w, dgate_b = gates_backward(dgates, gate_caches)
        for i in range(3):
            dz_list[i] = dz_list[i] + dz_gate[i]
    dz_list = [l2_normalize_rows_backward(d, nc)
               for d, nc in zip(dz_list, n_caches)]
    return float(loss), FusionLossGrads(dz_list, dh, dgate_w, dgate_b, dproj_f)


def total_loss(components: dict, cfg: LossConfig):
    """Weighted sum of the objective components.

    components maps any subset of {"cm", "im", "deg", "fusion"} to scalar
    values; missing components count as zero.  Returns (value, weights)
    where weights carries the multiplier applied to each component, which
    callers reuse to scale the matching gradients.
    """
    weights = {
        "cm": cfg.lambda_cm,
        "im": cfg.lambda_im,
        "deg": cfg.lambda_deg,
        "fusion": cfg.lambda_fuse,
    }
    value = sum(weights[k] * components.get(k, 0.0) for k in weights)
    return float(value), weights
