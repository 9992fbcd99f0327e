"""Synthetic three-modality action dataset and degradation operators.

Each action instance carries a skeleton block (T x J x 3), a point-set block
(T x P x 3) and an image-like feature block (T x F), all rendered from a
shared per-class latent trajectory so that every modality alone is
class-informative and the modalities share structure.

Degradations (modality dropout, skeleton joint noise, point sparsity,
joint/frame masking) are pure: they return fresh arrays and never touch
their input.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .linalg import SplitRng, load_matrix, save_matrix

MODALITIES = ("r", "s", "p")  # rgbd, skeleton, points; fixed order everywhere


@dataclass(frozen=True)
class GeneratorSpec:
    """Knobs for the synthetic dataset generator."""

    num_classes: int = 10
    latent_dim: int = 8
    frames: int = 8
    joints: int = 5
    points_per_frame: int = 32
    rgbd_dim: int = 48
    instance_noise: float = 0.3
    modality_noise: float = 0.05
    osc_amp: float = 2.0       # scale of the class-specific oscillation term
    render_scale: float = 1.0  # scale of the latent-to-modality render maps
    rgbd_scale: float = 0.03   # extra scale on the image-feature render map
    view_max_deg: float = 150.0  # per-sample sensor-pose rotation of skeleton/points
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.frames < 2:
            raise ValueError("frames must be >= 2")
        if self.joints < 2:
            raise ValueError("joints must be >= 2")
        if self.points_per_frame < 4:
            raise ValueError("points_per_frame must be >= 4")
        if self.rgbd_dim < self.latent_dim:
            raise ValueError("rgbd_dim must be >= latent_dim")
        if self.instance_noise < 0 or self.modality_noise < 0:
            raise ValueError("noise levels must be >= 0")
        if self.render_scale <= 0 or self.rgbd_scale <= 0:
            raise ValueError("render scales must be > 0")
        if self.view_max_deg < 0:
            raise ValueError("view_max_deg must be >= 0")


@dataclass
class Dataset:
    """A batch of labeled multi-modal samples (arrays share the sample axis)."""

    spec: GeneratorSpec
    rgbd: np.ndarray      # (n, T, F)
    skeleton: np.ndarray  # (n, T, J, 3)
    points: np.ndarray    # (n, T, P, 3)
    labels: np.ndarray    # (n,) int64
    availability: np.ndarray = None  # (n, 3) bool, order (r, s, p)
    ids: np.ndarray = None           # original sample ids, survive subsetting

    def __post_init__(self):
        if self.availability is None:
            self.availability = np.ones((len(self.labels), 3), dtype=bool)
        if self.ids is None:
            self.ids = np.arange(len(self.labels))

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.spec,
            self.rgbd[idx].copy(),
            self.skeleton[idx].copy(),
            self.points[idx].copy(),
            self.labels[idx].copy(),
            self.availability[idx].copy(),
            self.ids[idx].copy(),
        )

    def copy(self) -> "Dataset":
        return self.subset(np.arange(len(self)))


@dataclass(frozen=True)
class DegradationSpec:
    """Declarative description of one corruption scenario.

    kind is one of "none", "dropout", "sjn", "pcs", "skel_mask".
    """

    kind: str = "none"
    drop: tuple = ()          # modalities to drop, subset of ("r", "s", "p")
    sigma: float = 0.0        # sjn noise level
    sparsity: float = 0.0     # pcs dropped-point fraction D
    rho_joint: float = 0.0
    rho_frame: float = 0.0
    seed: int = 0
    allow_drop_all: bool = False

    def __post_init__(self):
        if self.kind not in ("none", "dropout", "sjn", "pcs", "skel_mask"):
            raise ValueError(f"unknown degradation kind {self.kind!r}")
        bad = set(self.drop) - set(MODALITIES)
        if bad:
            raise ValueError(f"unknown modalities in drop set: {sorted(bad)}")
        if self.kind == "dropout" and len(set(self.drop)) >= 3 and not self.allow_drop_all:
            raise ValueError("dropout must leave at least one modality")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError("sparsity must be in [0, 1)")
        for rho in (self.rho_joint, self.rho_frame):
            if not 0.0 <= rho <= 1.0:
                raise ValueError("mask ratios must be in [0, 1]")

    def label(self) -> str:
        if self.kind == "dropout":
            return "dropout_" + "".join(sorted(self.drop))
        if self.kind == "sjn":
            return f"sjn_{self.sigma:g}"
        if self.kind == "pcs":
            return f"pcs_{self.sparsity:g}"
        if self.kind == "skel_mask":
            return f"skel_mask_{self.rho_joint:g}_{self.rho_frame:g}"
        return "none"


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def random_rotation(rng: np.random.Generator, max_rad: float) -> np.ndarray:
    """Rotation by a random angle in [-max_rad, max_rad] about a random axis."""
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_rad, max_rad)
    k = np.array([
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def generate(spec: GeneratorSpec, n_per_class: int) -> Dataset:
    """Render K * n_per_class samples from shared per-class latents.

    Per class c: a prototype mu_c, an oscillation direction a_c with
    class-specific frequency w_c, and a base point cloud B_c.  Per sample:
    latent trajectory z_t = mu_c + sigma_inst * eps + a_c * sin(w_c t + phi)
    rendered into each modality through fixed random maps, plus additive
    modality noise.  Fully deterministic per spec.seed.
    """
    spec.validate()
    if n_per_class < 2:
        raise ValueError("n_per_class must be >= 2")
    K, dz, T, J, P, F = (
        spec.num_classes, spec.latent_dim, spec.frames,
        spec.joints, spec.points_per_frame, spec.rgbd_dim,
    )
    root = SplitRng(spec.seed).child("datagen")
    g_cls = root.child("classes").generator()
    mu = g_cls.standard_normal((K, dz))
    a_dir = g_cls.standard_normal((K, dz))
    a_dir /= np.linalg.norm(a_dir, axis=1, keepdims=True)
    a = a_dir * spec.osc_amp
    omega = g_cls.uniform(0.4, 1.2, size=K)

    g_map = root.child("maps").generator()
    rs = spec.render_scale
    w_s = g_map.standard_normal((dz, J * 3)) * (rs / math.sqrt(dz))
    w_r = g_map.standard_normal((dz, F)) * (1.5 * rs * spec.rgbd_scale / math.sqrt(dz))
    b_r = g_map.standard_normal(F) * 0.3
    w_p = g_map.standard_normal((dz, P * 3)) * (0.6 * rs / math.sqrt(dz))
    base_cloud = root.child("base_clouds").generator().standard_normal((K, P, 3)) * rs

    n = K * n_per_class
    rgbd = np.empty((n, T, F))
    skel = np.empty((n, T, J, 3))
    pts = np.empty((n, T, P, 3))
    labels = np.empty(n, dtype=np.int64)
    t_axis = np.arange(T, dtype=np.float64)
    view_rad = math.radians(spec.view_max_deg)

    i = 0
    for c in range(K):
        g_c = root.child(f"class_{c}").generator()
        for _ in range(n_per_class):
            eps = g_c.standard_normal(dz)
            phi = g_c.uniform(0.0, 2.0 * math.pi)
            # (T, dz) latent trajectory
            osc = np.sin(omega[c] * t_axis + phi)[:, None] * a[c][None, :]
            z = mu[c][None, :] + spec.instance_noise * eps[None, :] + osc
            skel[i] = (z @ w_s).reshape(T, J, 3)
            rgbd[i] = np.tanh(z @ w_r + b_r)
            pts[i] = base_cloud[c][None, :, :] + (z @ w_p).reshape(T, P, 3)
            if view_rad > 0:
                # sensor-pose nuisance: each geometric modality is observed
                # under its own random rigid rotation
                skel[i] = skel[i] @ random_rotation(g_c, view_rad).T
                pts[i] = pts[i] @ random_rotation(g_c, view_rad).T
            labels[i] = c
            i += 1

    if spec.modality_noise > 0:
        g_n = root.child("modality_noise").generator()
        rgbd += g_n.normal(0.0, spec.modality_noise, size=rgbd.shape)
        skel += g_n.normal(0.0, spec.modality_noise, size=skel.shape)
        pts += g_n.normal(0.0, spec.modality_noise, size=pts.shape)

    return Dataset(spec, rgbd, skel, pts, labels)


def split(dataset: Dataset, train_fraction: float, seed: int):
    """Stratified, disjoint, deterministic train/test split."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    labels = dataset.labels
    rng = SplitRng(seed).child("split").generator()
    train_idx, test_idx = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < 2:
            raise ValueError(f"class {c} has fewer than 2 samples")
        perm = rng.permutation(len(idx))
        cut = int(round(train_fraction * len(idx)))
        cut = min(max(cut, 1), len(idx) - 1)
        train_idx.extend(idx[perm[:cut]])
        test_idx.extend(idx[perm[cut:]])
    train_idx = np.sort(np.array(train_idx))
    test_idx = np.sort(np.array(test_idx))
    return dataset.subset(train_idx), dataset.subset(test_idx)


# ---------------------------------------------------------------------------
# degradations
# ---------------------------------------------------------------------------

def mask_skeleton(x: np.ndarray, rho_joint: float, rho_frame: float,
                  rng: np.random.Generator):
    """Zero whole joints / whole frames at the given rates.

    x is (T, J, 3) or a batch (n, T, J, 3).  Returns (masked, mask) where
    mask has shape (..., T, J) and is 1 where coordinates were kept.
    """
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 4
    xs = x if batched else x[None]
    n, T, J, _ = xs.shape
    joint_keep = rng.random((n, J)) >= rho_joint
    frame_keep = rng.random((n, T)) >= rho_frame
    mask = (frame_keep[:, :, None] & joint_keep[:, None, :]).astype(np.float64)
    masked = xs * mask[:, :, :, None]
    if not batched:
        return masked[0], mask[0]
    return masked, mask


def apply_degradation(batch: Dataset, d: DegradationSpec) -> Dataset:
    """Apply one corruption scenario; input is untouched."""
    out = batch.copy()
    if d.kind == "none":
        return out
    rng = SplitRng(d.seed).child("degrade_" + d.label()).generator()
    if d.kind == "dropout":
        for m in d.drop:
            col = MODALITIES.index(m)
            out.availability[:, col] = False
            if m == "r":
                out.rgbd[:] = 0.0
            elif m == "s":
                out.skeleton[:] = 0.0
            else:
                out.points[:] = 0.0
        return out
    if d.kind == "sjn":
        if d.sigma > 0:
            out.skeleton += rng.normal(0.0, d.sigma, size=out.skeleton.shape)
        return out
    if d.kind == "pcs":
        n, T, P, _ = out.points.shape
        keep = math.ceil((1.0 - d.sparsity) * P)
        for i in range(n):
            for t in range(T):
                kept = np.sort(rng.choice(P, size=keep, replace=False))
                frame = out.points[i, t]
                centroid = frame[kept].mean(axis=0)
                dropped = np.setdiff1d(np.arange(P), kept, assume_unique=True)
                frame[dropped] = centroid
        return out
    # skel_mask
    masked, _ = mask_skeleton(out.skeleton, d.rho_joint, d.rho_frame, rng)
    out.skeleton = masked
    return out


# ---------------------------------------------------------------------------
# on-disk layout: manifest.json + one binary blob per modality + labels
# ---------------------------------------------------------------------------

_BLOBS = {
    "rgbd": "rgbd.bin",
    "skeleton": "skeleton.bin",
    "points": "points.bin",
    "labels": "labels.bin",
}


def save_dataset(path: str, dataset: Dataset, extra: dict | None = None) -> None:
    """Write the dataset directory (3-D/4-D blocks stored as flattened rows)."""
    os.makedirs(path, exist_ok=True)
    n = len(dataset)
    manifest = {
        "format_version": 1,
        "spec": dataclasses.asdict(dataset.spec),
        "counts": {
            "samples": n,
            "per_class": np.bincount(
                dataset.labels, minlength=dataset.spec.num_classes
            ).tolist(),
        },
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    save_matrix(os.path.join(path, _BLOBS["rgbd"]), dataset.rgbd.reshape(n, -1))
    save_matrix(os.path.join(path, _BLOBS["skeleton"]), dataset.skeleton.reshape(n, -1))
    save_matrix(os.path.join(path, _BLOBS["points"]), dataset.points.reshape(n, -1))
    save_matrix(
        os.path.join(path, _BLOBS["labels"]),
        dataset.labels.astype(np.float64).reshape(n, 1),
    )


def load_dataset(path: str) -> Dataset:
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    spec_fields = {f.name for f in dataclasses.fields(GeneratorSpec)}
    spec = GeneratorSpec(**{k: v for k, v in manifest["spec"].items()
                            if k in spec_fields})
    n = manifest["counts"]["samples"]
    T, J, P, F = spec.frames, spec.joints, spec.points_per_frame, spec.rgbd_dim
    rgbd = load_matrix(os.path.join(path, _BLOBS["rgbd"])).reshape(n, T, F)
    skel = load_matrix(os.path.join(path, _BLOBS["skeleton"])).reshape(n, T, J, 3)
    pts = load_matrix(os.path.join(path, _BLOBS["points"])).reshape(n, T, P, 3)
    labels = load_matrix(os.path.join(path, _BLOBS["labels"]))
    return Dataset(spec, rgbd, skel, pts, labels.reshape(-1).astype(np.int64))


def load_manifest(path: str) -> dict:
    with open(os.path.join(path, "manifest.json")) as fh:
        return json.load(fh)
