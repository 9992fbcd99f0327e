"""Optimizer, schedule, augmentations and the two-phase training pipeline.

Phase one is label-free: per batch, two augmented views of every modality
feed the cross-modal and intra-modal objectives, a masked skeleton feeds
the reconstruction objective, and a partially corrupted batch copy feeds
the fused-to-modality alignment objective that trains the gates.  Phase
two either trains a linear classifier on frozen fused features or
fine-tunes the whole network with cross-entropy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, MODALITIES, mask_skeleton, random_rotation
from .fusion import fuse, fuse_backward, gates_backward, gates_forward
from .linalg import (NumericError, SplitRng, l2_normalize_rows,
                     l2_normalize_rows_backward)
from .losses import (
    LossConfig,
    barlow_loss,
    cross_entropy,
    cross_modal_total,
    degradation_loss,
    fusion_alignment_loss,
    total_loss,
)
from .model import (
    ENCODERS,
    ModelDims,
    ModelParams,
    accumulate,
    decode_skeleton,
    decode_skeleton_backward,
    encode_skeleton,
    encode_skeleton_backward,
    init_params,
    project,
    project_backward,
)


@dataclass(frozen=True)
class AugmentParams:
    """Per-modality augmentation strengths; all zeros is the identity."""

    rotate_max_deg: float = 120.0  # random rigid rotation of skeleton and points
    jitter_sigma: float = 0.02
    rgbd_dropout: float = 0.1
    point_resample: bool = True    # subsample-with-replacement of the points


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    warmup_epochs: int = 10
    batch_size: int = 128
    base_lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentParams = field(default_factory=AugmentParams)
    degrade_prob: float = 0.3      # chance a modality is zeroed for the fusion loss
    gate_lr_scale: float = 1.0     # lr multiplier for the gate parameters
    mask_rho_joint: float = 0.3
    mask_rho_frame: float = 0.3
    fusion_mode: str = "amg"       # "amg" or "average" (gates forced equal)
    feature_dim: int = 64
    proj_dim: int = 32
    hidden_dim: int = 64
    probe_epochs: int = 200
    probe_lr: float = 0.05
    finetune_epochs: int = 30
    finetune_lr: float = 1e-3

    def __post_init__(self):
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be < epochs")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.fusion_mode not in ("amg", "average"):
            raise ValueError(f"unknown fusion_mode {self.fusion_mode!r}")
        if not 0.0 <= self.degrade_prob <= 1.0:
            raise ValueError("degrade_prob must be in [0, 1]")


# ---------------------------------------------------------------------------
# AdamW with decoupled weight decay
# ---------------------------------------------------------------------------

class OptimState:
    """First/second moment accumulators for a fixed set of parameter names."""

    def __init__(self, params: ModelParams, trainable=None,
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0,
                 lr_scale: dict | None = None):
        named = dict(params.named_arrays())
        self.trainable = list(trainable) if trainable is not None else list(named)
        for name in self.trainable:
            if name not in named:
                raise KeyError(f"unknown parameter {name}")
        self.m = {n: np.zeros_like(named[n]) for n in self.trainable}
        self.v = {n: np.zeros_like(named[n]) for n in self.trainable}
        self.step = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.lr_scale = dict(lr_scale) if lr_scale else {}


def adamw_step(params: ModelParams, grads: dict, state: OptimState,
               lr: float) -> None:
    """One bias-corrected update; decay is applied to the weights directly."""
    state.step += 1
    t = state.step
    named = dict(params.named_arrays())
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in state.trainable:
        g = grads[name]
        p = named[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}: "
                             f"{g.shape} vs {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p -= lr * state.lr_scale.get(name, 1.0) \
            * (update + state.weight_decay * p)


def lr_at(epoch_fraction: float, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr, then cosine decay to zero."""
    if not 0.0 <= epoch_fraction <= 1.0:
        raise ValueError("epoch_fraction must be in [0, 1]")
    wf = cfg.warmup_epochs / cfg.epochs
    if epoch_fraction < wf:
        return cfg.base_lr * epoch_fraction / wf
    progress = (epoch_fraction - wf) / (1.0 - wf)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# augmentations (batched; rng draw order is fixed)
# ---------------------------------------------------------------------------

def _rotate_batch(out: np.ndarray, rng: np.random.Generator,
                  max_deg: float) -> None:
    """In-place per-sample random rigid rotation of (n, T, ., 3) coords.

    Mirrors the sensor-pose nuisance of the generator so the contrastive
    views span the same pose variation the encoders must become
    invariant to.
    """
    rad = math.radians(max_deg)
    for i in range(out.shape[0]):
        out[i] = out[i] @ random_rotation(rng, rad).T


def augment_skeleton(x: np.ndarray, rng: np.random.Generator,
                     ap: AugmentParams) -> np.ndarray:
    out = x.copy()
    if ap.rotate_max_deg > 0:
        _rotate_batch(out, rng, ap.rotate_max_deg)
    if ap.jitter_sigma > 0:
        out += rng.normal(0.0, ap.jitter_sigma, size=out.shape)
    return out


def augment_points(x: np.ndarray, rng: np.random.Generator,
                   ap: AugmentParams) -> np.ndarray:
    out = x
    if ap.point_resample:
        n, T, P, _ = x.shape
        idx = rng.integers(0, P, size=(n, P))
        idxb = np.broadcast_to(idx[:, None, :, None], (n, T, P, 3))
        out = np.take_along_axis(x, idxb, axis=2)
    out = out.copy()
    if ap.rotate_max_deg > 0:
        _rotate_batch(out, rng, ap.rotate_max_deg)
    if ap.jitter_sigma > 0:
        out += rng.normal(0.0, ap.jitter_sigma, size=out.shape)
    return out


def augment_rgbd(x: np.ndarray, rng: np.random.Generator,
                 ap: AugmentParams) -> np.ndarray:
    out = x.copy()
    if ap.rgbd_dropout > 0:
        n, _, F = x.shape
        keep = rng.random((n, F)) >= ap.rgbd_dropout
        out *= keep[:, None, :]
    if ap.jitter_sigma > 0:
        out += rng.normal(0.0, ap.jitter_sigma, size=out.shape)
    return out


def augment(batch_arrays, rng: np.random.Generator, ap: AugmentParams):
    """One augmented view of (rgbd, skeleton, points) batch arrays."""
    x_r, x_s, x_p = batch_arrays
    return (augment_rgbd(x_r, rng, ap),
            augment_skeleton(x_s, rng, ap),
            augment_points(x_p, rng, ap))


# ---------------------------------------------------------------------------
# pre-training
# ---------------------------------------------------------------------------

def pretrain_batch(params: ModelParams, batch_arrays, cfg: TrainConfig,
                   rng: SplitRng):
    """Loss components and the full gradient of one pre-training step.

    batch_arrays is (rgbd, skeleton, points); labels never enter here.
    Returns (components dict, grads dict).
    """
    x_r, x_s, x_p = batch_arrays
    tau = cfg.loss.temperature
    grads = params.zero_grads()
    _, weights = total_loss({}, cfg.loss)

    views, enc_caches, proj_caches, Z, H = {}, {}, {}, {}, {}
    for v in (1, 2):
        view = augment((x_r, x_s, x_p), rng.child(f"view{v}").generator(),
                       cfg.augment)
        for m, x in zip(MODALITIES, view):
            fwd = ENCODERS[m][0]
            z, ec = fwd(x, params)
            h, pc = project(z, getattr(params, f"proj_{m}"))
            Z[(m, v)], H[(m, v)] = z, h
            enc_caches[(m, v)], proj_caches[(m, v)] = ec, pc
    dH = {key: np.zeros_like(h) for key, h in H.items()}

    components = {}
    if weights["cm"] > 0:
        l_cm, (dr, ds, dp) = cross_modal_total(
            H[("r", 1)], H[("s", 1)], H[("p", 1)], tau)
        components["cm"] = l_cm
        for m, d in zip(MODALITIES, (dr, ds, dp)):
            dH[(m, 1)] += weights["cm"] * d

    if weights["im"] > 0:
        l_im = 0.0
        for m in MODALITIES:
            l, d1, d2 = barlow_loss(H[(m, 1)], H[(m, 2)], cfg.loss.barlow_lambda)
            l_im += l
            dH[(m, 1)] += weights["im"] * d1
            dH[(m, 2)] += weights["im"] * d2
        components["im"] = l_im

    if weights["deg"] > 0:
        masked, _ = mask_skeleton(x_s, cfg.mask_rho_joint, cfg.mask_rho_frame,
                                  rng.child("mask").generator())
        z_deg, ec_deg = encode_skeleton(masked, params)
        recon, dec_cache = decode_skeleton(z_deg, params)
        l_deg, drecon = degradation_loss(recon, x_s)
        components["deg"] = l_deg
        dz_deg, dec_grads = decode_skeleton_backward(
            weights["deg"] * drecon, params, dec_cache)
        accumulate(grads, "dec_s", dec_grads)
        _, enc_grads = encode_skeleton_backward(dz_deg, params, ec_deg)
        accumulate(grads, "enc_s", enc_grads)

    if weights["fusion"] > 0:
        g_deg = rng.child("degrade").generator()
        n = x_r.shape[0]
        draws = g_deg.random((n, 3))
        corrupt_mask = draws < cfg.degrade_prob  # (r, s, p)
        # never corrupt every stream of a sample: keep the modality whose
        # draw was closest to surviving
        all_gone = corrupt_mask.all(axis=1)
        if np.any(all_gone):
            keep = draws[all_gone].argmax(axis=1)
            corrupt_mask[np.flatnonzero(all_gone), keep] = False
        xc = [x_r.copy(), x_s.copy(), x_p.copy()]
        for col in range(3):
            xc[col][corrupt_mask[:, col]] = 0.0
        zc, zc_caches = [], []
        for m, x in zip(MODALITIES, xc):
            z, ec = ENCODERS[m][0](x, params)
            zc.append(z)
            zc_caches.append(ec)
        l_fuse, fg = fusion_alignment_loss(
            zc[0], zc[1], zc[2], params,
            H[("r", 1)], H[("s", 1)], H[("p", 1)], tau,
            availability=~corrupt_mask,
            force_equal_gates=(cfg.fusion_mode == "average"))
        components["fusion"] = l_fuse
        w = weights["fusion"]
        grads["gate_w"] += w * fg.dgate_w
        grads["gate_b"] += w * fg.dgate_b
        accumulate(grads, "proj_f", fg.dproj_f, w)
        for i, m in enumerate(MODALITIES):
            _, eg = ENCODERS[m][1](w * fg.dz[i], params, zc_caches[i])
            accumulate(grads, ENCODERS[m][2], eg)
            dH[(m, 1)] += w * fg.dh[i]

    for (m, v), dh in dH.items():
        if not dh.any():
            continue
        head = getattr(params, f"proj_{m}")
        dz, pg = project_backward(dh, head, proj_caches[(m, v)])
        accumulate(grads, f"proj_{m}", pg)
        _, eg = ENCODERS[m][1](dz, params, enc_caches[(m, v)])
        accumulate(grads, ENCODERS[m][2], eg)

    return components, grads


PRETRAIN_PARAM_PREFIXES = ("enc_r", "enc_s", "enc_p", "proj_r", "proj_s",
                           "proj_p", "proj_f", "dec_s", "gate_w", "gate_b")

HISTORY_COLUMNS = ("epoch", "l_cm", "l_im", "l_deg", "l_fusion", "l_total", "lr")


def pretrain(dataset: Dataset, cfg: TrainConfig, params: ModelParams = None):
    """Self-supervised pre-training; labels are never read.

    Returns (params, history) where history is one dict per epoch with the
    HISTORY_COLUMNS keys (per-batch means).
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    dims = ModelDims.from_generator(dataset.spec, cfg.feature_dim,
                                    cfg.proj_dim, cfg.hidden_dim)
    if params is None:
        params = init_params(dims, cfg.seed)
    root = SplitRng(cfg.seed).child("pretrain")
    trainable = [name for name, _ in params.named_arrays()
                 if name.startswith(PRETRAIN_PARAM_PREFIXES)]
    state = OptimState(params, trainable, weight_decay=cfg.weight_decay,
                       lr_scale={"gate_w": cfg.gate_lr_scale,
                                 "gate_b": cfg.gate_lr_scale})
    n = len(dataset)
    arrays = (dataset.rgbd, dataset.skeleton, dataset.points)
    history = []
    for epoch in range(cfg.epochs):
        erng = root.child(f"epoch_{epoch}")
        order = erng.child("shuffle").generator().permutation(n)
        lr = lr_at((epoch + 0.5) / cfg.epochs, cfg)
        sums = {"cm": 0.0, "im": 0.0, "deg": 0.0, "fusion": 0.0}
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            batch = tuple(a[idx] for a in arrays)
            try:
                components, grads = pretrain_batch(
                    params, batch, cfg, erng.child(f"batch_{n_batches}"))
            except NumericError as exc:
                raise NumericError(
                    f"epoch {epoch} batch {n_batches}: {exc}") from exc
            total, _ = total_loss(components, cfg.loss)
            if not math.isfinite(total):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} batch {n_batches}")
            adamw_step(params, grads, state, lr)
            for k in sums:
                sums[k] += components.get(k, 0.0)
            n_batches += 1
        means = {k: (v / n_batches if n_batches else 0.0)
                 for k, v in sums.items()}
        total_mean, _ = total_loss(means, cfg.loss)
        history.append({
            "epoch": epoch,
            "l_cm": means["cm"], "l_im": means["im"], "l_deg": means["deg"],
            "l_fusion": means["fusion"], "l_total": total_mean, "lr": lr,
        })
    return params, history


def history_csv(history) -> str:
    lines = [",".join(HISTORY_COLUMNS)]
    for row in history:
        lines.append(",".join(
            str(row["epoch"]) if col == "epoch" else f"{row[col]:.10g}"
            for col in HISTORY_COLUMNS))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

def fused_features(params: ModelParams, dataset: Dataset,
                   force_equal: bool = False, batch_size: int = 512):
    """Clean forward pass to per-sample fused features.  (n, d_f)."""
    outs = []
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        z_r = l2_normalize_rows(ENCODERS["r"][0](dataset.rgbd[sl], params)[0])[0]
        z_s = l2_normalize_rows(ENCODERS["s"][0](dataset.skeleton[sl], params)[0])[0]
        z_p = l2_normalize_rows(ENCODERS["p"][0](dataset.points[sl], params)[0])[0]
        gates, _ = gates_forward(z_r, z_s, z_p, params)
        z_f, _ = fuse(z_r, z_s, z_p, gates,
                      availability=dataset.availability[sl],
                      force_equal=force_equal)
        outs.append(z_f)
    return np.concatenate(outs, axis=0)


def evaluate(params: ModelParams, dataset: Dataset,
             force_equal: bool = False) -> float:
    """Top-1 accuracy (percent) of the classifier over fused features."""
    feats = fused_features(params, dataset, force_equal=force_equal)
    logits = feats @ params.cls_w + params.cls_b
    pred = logits.argmax(axis=1)
    return 100.0 * float((pred == dataset.labels).mean())


# ---------------------------------------------------------------------------
# linear probe and full fine-tune
# ---------------------------------------------------------------------------

def linear_probe(params: ModelParams, train: Dataset, test: Dataset,
                 cfg: TrainConfig, force_equal: bool = None):
    """Train only the linear classifier on frozen fused features.

    Returns (params_copy, train_acc, test_acc).  Everything except the
    classifier is byte-identical to the input.
    """
    if len(train) == 0 or len(test) == 0:
        raise ValueError("probe split is empty")
    if force_equal is None:
        force_equal = cfg.fusion_mode == "average"
    out = params.copy()
    feats = fused_features(out, train, force_equal=force_equal)
    labels = train.labels
    d_f, k = out.cls_w.shape
    g = SplitRng(cfg.seed).child("probe_init").generator()
    out.cls_w[...] = g.normal(0.0, math.sqrt(1.0 / d_f), size=(d_f, k))
    out.cls_b[...] = 0.0
    state = OptimState(out, ["cls_w", "cls_b"], weight_decay=1e-4)
    for _ in range(cfg.probe_epochs):
        logits = feats @ out.cls_w + out.cls_b
        _, dlogits = cross_entropy(logits, labels)
        grads = {"cls_w": feats.T @ dlogits, "cls_b": dlogits.sum(axis=0)}
        adamw_step(out, grads, state, cfg.probe_lr)
    train_acc = evaluate(out, train, force_equal=force_equal)
    test_acc = evaluate(out, test, force_equal=force_equal)
    return out, train_acc, test_acc


FINETUNE_PARAM_PREFIXES = ("enc_r", "enc_s", "enc_p", "gate_w", "gate_b",
                           "cls_w", "cls_b")


def full_finetune(params: ModelParams, train: Dataset, test: Dataset,
                  cfg: TrainConfig, force_equal: bool = None):
    """Supervised cross-entropy through the gated fusion; updates the
    encoders, gates and classifier.  Returns (params_copy, test_acc)."""
    if len(train) == 0 or len(test) == 0:
        raise ValueError("finetune split is empty")
    if force_equal is None:
        force_equal = cfg.fusion_mode == "average"
    out = params.copy()
    trainable = [name for name, _ in out.named_arrays()
                 if name.startswith(FINETUNE_PARAM_PREFIXES)]
    if force_equal:
        trainable = [n for n in trainable if not n.startswith("gate_")]
    state = OptimState(out, trainable, weight_decay=cfg.weight_decay)
    root = SplitRng(cfg.seed).child("finetune")
    n = len(train)
    arrays = (train.rgbd, train.skeleton, train.points)
    ft_cfg = replace(cfg, epochs=max(cfg.finetune_epochs, 2),
                     warmup_epochs=min(cfg.warmup_epochs,
                                       max(cfg.finetune_epochs, 2) - 1),
                     base_lr=cfg.finetune_lr)
    for epoch in range(cfg.finetune_epochs):
        order = root.child(f"epoch_{epoch}").generator().permutation(n)
        lr = lr_at((epoch + 0.5) / max(cfg.finetune_epochs, 1), ft_cfg)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) == 0:
                continue
            x_r, x_s, x_p = (a[idx] for a in arrays)
            labels = train.labels[idx]
            grads = out.zero_grads()
            z, caches, n_caches = [], [], []
            for m, x in zip(MODALITIES, (x_r, x_s, x_p)):
                zi, ci = ENCODERS[m][0](x, out)
                z_hat, nc = l2_normalize_rows(zi)
                z.append(z_hat)
                caches.append(ci)
                n_caches.append(nc)
            gates, gate_caches = gates_forward(*z, out)
            z_f, fuse_cache = fuse(*z, gates, force_equal=force_equal)
            logits = z_f @ out.cls_w + out.cls_b
            _, dlogits = cross_entropy(logits, labels)
            grads["cls_w"] += z_f.T @ dlogits
            grads["cls_b"] += dlogits.sum(axis=0)
            dz_f = dlogits @ out.cls_w.T
            dz_list, dgates = fuse_backward(dz_f, fuse_cache)
            if not force_equal:
                dz_gate, dgw, dgb = gates_backward(dgates, gate_caches)
                grads["gate_w"] += dgw
                grads["gate_b"] += dgb
                for i in range(3):
                    dz_list[i] = dz_list[i] + dz_gate[i]
            for i, m in enumerate(MODALITIES):
                dz = l2_normalize_rows_backward(dz_list[i], n_caches[i])
                _, eg = ENCODERS[m][1](dz, out, caches[i])
                accumulate(grads, ENCODERS[m][2], eg)
            adamw_step(out, grads, state, lr)
    return out, evaluate(out, test, force_equal=force_equal)
