"""Desk-scale encoders, projection heads, skeleton decoder and classifier.

The three modality encoders are small MLP analogues that keep the defining
symmetry of the backbone they stand in for:

* image-like stream: shared per-frame MLP, mean over frames;
* skeleton stream: joints mixed by a normalized chain-graph adjacency,
  per-frame MLP, mean over frames;
* point stream: shared per-point MLP, coordinate-wise max over the points
  of each frame, mean over frames.

Every forward returns a cache; the matching backward returns input
gradients plus per-parameter gradients verified against central finite
differences in the test suite.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .linalg import (
    ACTIVATIONS,
    ShapeError,
    SplitRng,
    affine_backward,
    affine_forward,
    l2_normalize_rows,
    l2_normalize_rows_backward,
    matrix_from_bytes,
    matrix_to_bytes,
)

CHECKPOINT_MAGIC = b"RCMC"


@dataclass
class Layer:
    w: np.ndarray  # (fan_in, fan_out)
    b: np.ndarray  # (fan_out,)
    act: str       # relu | tanh | sigmoid | none


Mlp = list  # list[Layer]


@dataclass(frozen=True)
class ModelDims:
    """Static architecture description; everything else derives from it."""

    frames: int = 8
    joints: int = 5
    points_per_frame: int = 32
    rgbd_dim: int = 48
    num_classes: int = 10
    feature_dim: int = 64
    proj_dim: int = 32
    hidden_dim: int = 64

    @classmethod
    def from_generator(cls, spec, feature_dim=64, proj_dim=32, hidden_dim=64):
        return cls(
            frames=spec.frames,
            joints=spec.joints,
            points_per_frame=spec.points_per_frame,
            rgbd_dim=spec.rgbd_dim,
            num_classes=spec.num_classes,
            feature_dim=feature_dim,
            proj_dim=proj_dim,
            hidden_dim=hidden_dim,
        )


def chain_graph_mix(joints: int) -> np.ndarray:
    """Normalized adjacency D^{-1/2} (A + I) D^{-1/2} for a joint chain."""
    a = np.eye(joints)
    for i in range(joints - 1):
        a[i, i + 1] = 1.0
        a[i + 1, i] = 1.0
    deg = a.sum(axis=1)
    d_inv_sqrt = 1.0 / np.sqrt(deg)
    return d_inv_sqrt[:, None] * a * d_inv_sqrt[None, :]


@dataclass
class ModelParams:
    dims: ModelDims
    enc_r: Mlp
    enc_s: Mlp
    enc_p: Mlp
    proj_r: Mlp
    proj_s: Mlp
    proj_p: Mlp
    proj_f: Mlp
    dec_s: Mlp
    gate_w: np.ndarray  # (3, feature_dim), rows in (r, s, p) order
    gate_b: np.ndarray  # (3,)
    cls_w: np.ndarray   # (feature_dim, num_classes)
    cls_b: np.ndarray   # (num_classes,)
    graph_mix: np.ndarray = None  # fixed buffer, not trained

    def __post_init__(self):
        if self.graph_mix is None:
            self.graph_mix = chain_graph_mix(self.dims.joints)

    MLP_NAMES = ("enc_r", "enc_s", "enc_p", "proj_r", "proj_s",
                 "proj_p", "proj_f", "dec_s")

    def named_arrays(self):
        """Yield (name, array) for every trainable parameter, fixed order."""
        for mlp_name in self.MLP_NAMES:
            for i, layer in enumerate(getattr(self, mlp_name)):
                yield f"{mlp_name}.{i}.w", layer.w
                yield f"{mlp_name}.{i}.b", layer.b
        yield "gate_w", self.gate_w
        yield "gate_b", self.gate_b
        yield "cls_w", self.cls_w
        yield "cls_b", self.cls_b

    def zero_grads(self) -> dict:
        return {name: np.zeros_like(arr) for name, arr in self.named_arrays()}

    def copy(self) -> "ModelParams":
        def copy_mlp(mlp):
            return [Layer(l.w.copy(), l.b.copy(), l.act) for l in mlp]
        return ModelParams(
            self.dims,
            *[copy_mlp(getattr(self, n)) for n in self.MLP_NAMES],
            gate_w=self.gate_w.copy(), gate_b=self.gate_b.copy(),
            cls_w=self.cls_w.copy(), cls_b=self.cls_b.copy(),
            graph_mix=self.graph_mix.copy(),
        )

    def get(self, name: str) -> np.ndarray:
        for n, arr in self.named_arrays():
            if n == name:
                return arr
        raise KeyError(name)

    def set_flat(self, values: dict) -> None:
        """Overwrite parameters in place from a name -> array mapping."""
        for name, arr in self.named_arrays():
            arr[...] = values[name]


def accumulate(grads: dict, prefix: str, layer_grads, weight: float = 1.0):
    """Add weighted per-layer (dw, db) pairs into the flat gradient dict."""
    for i, (dw, db) in enumerate(layer_grads):
        grads[f"{prefix}.{i}.w"] += weight * dw
        grads[f"{prefix}.{i}.b"] += weight * db


# ---------------------------------------------------------------------------
# MLP forward/backward
# ---------------------------------------------------------------------------

def mlp_forward(mlp: Mlp, x: np.ndarray):
    caches = []
    h = x
    for layer in mlp:
        z, aff_cache = affine_forward(h, layer.w, layer.b)
        fwd, _ = ACTIVATIONS[layer.act]
        h, act_cache = fwd(z)
        caches.append((aff_cache, act_cache, layer.act))
    return h, caches


def mlp_backward(mlp: Mlp, caches, dy: np.ndarray):
    """Returns (dx, [(dw, db) per layer in forward order])."""
    grads = [None] * len(mlp)
    for i in range(len(mlp) - 1, -1, -1):
        aff_cache, act_cache, act = caches[i]
        _, bwd = ACTIVATIONS[act]
        dz = bwd(dy, act_cache)
        dy, dw, db = affine_backward(dz, aff_cache)
        grads[i] = (dw, db)
    return dy, grads


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

def encode_rgbd(x: np.ndarray, params: ModelParams):
    """Per-frame MLP then mean over frames.  x: (n, T, F) -> (n, d_f)."""
    d = params.dims
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != (d.frames, d.rgbd_dim):
        raise ShapeError(f"rgbd block shape {x.shape[1:]} != "
                         f"({d.frames}, {d.rgbd_dim})")
    n, T, F = x.shape
    flat = x.reshape(n * T, F)
    feats, caches = mlp_forward(params.enc_r, flat)
    z = feats.reshape(n, T, -1).mean(axis=1)
    return z, (caches, n, T)


def encode_rgbd_backward(dz: np.ndarray, params: ModelParams, cache):
    caches, n, T = cache
    dfeat = np.repeat(dz / T, T, axis=0)
    dflat, grads = mlp_backward(params.enc_r, caches, dfeat)
    dx = dflat.reshape(n, T, -1)
    return dx, grads


def encode_skeleton(x: np.ndarray, params: ModelParams):
    """Graph-mix joints, per-frame MLP, mean over frames.

    x: (n, T, J, 3) -> (n, d_f).
    """
    d = params.dims
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != (d.frames, d.joints, 3):
        raise ShapeError(f"skeleton block shape {x.shape[1:]} != "
                         f"({d.frames}, {d.joints}, 3)")
    n, T, J, _ = x.shape
    mixed = np.einsum("ij,ntjc->ntic", params.graph_mix, x)
    flat = mixed.reshape(n * T, J * 3)
    feats, caches = mlp_forward(params.enc_s, flat)
    z = feats.reshape(n, T, -1).mean(axis=1)
    return z, (caches, n, T, J)


def encode_skeleton_backward(dz: np.ndarray, params: ModelParams, cache):
    caches, n, T, J = cache
    dfeat = np.repeat(dz / T, T, axis=0)
    dflat, grads = mlp_backward(params.enc_s, caches, dfeat)
    dmixed = dflat.reshape(n, T, J, 3)
    dx = np.einsum("ij,ntic->ntjc", params.graph_mix, dmixed)
    return dx, grads


def encode_points(x: np.ndarray, params: ModelParams):
    """Shared per-point MLP, max over points per frame, mean over frames.

    Max ties break toward the lowest point index (np.argmax convention).
    x: (n, T, P, 3) -> (n, d_f).
    """
    d = params.dims
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != (d.frames, d.points_per_frame, 3):
        raise ShapeError(f"point block shape {x.shape[1:]} != "
                         f"({d.frames}, {d.points_per_frame}, 3)")
    n, T, P, _ = x.shape
    flat = x.reshape(n * T * P, 3)
    feats, caches = mlp_forward(params.enc_p, flat)
    per_point = feats.reshape(n, T, P, -1)
    argmax = per_point.argmax(axis=2)                      # (n, T, d_f)
    pooled = np.take_along_axis(per_point, argmax[:, :, None, :], axis=2)[:, :, 0, :]
    z = pooled.mean(axis=1)
    return z, (caches, argmax, n, T, P)


def encode_points_backward(dz: np.ndarray, params: ModelParams, cache):
    caches, argmax, n, T, P = cache
    d_f = dz.shape[1]
    dpooled = np.repeat(dz[:, None, :] / T, T, axis=1)     # (n, T, d_f)
    dper_point = np.zeros((n, T, P, d_f))
    np.put_along_axis(dper_point, argmax[:, :, None, :], dpooled[:, :, None, :], axis=2)
    dflat, grads = mlp_backward(params.enc_p, caches, dper_point.reshape(n * T * P, d_f))
    dx = dflat.reshape(n, T, P, 3)
    return dx, grads


ENCODERS = {
    "r": (encode_rgbd, encode_rgbd_backward, "enc_r"),
    "s": (encode_skeleton, encode_skeleton_backward, "enc_s"),
    "p": (encode_points, encode_points_backward, "enc_p"),
}


def project(z: np.ndarray, head: Mlp, eps: float = 1e-12):
    """Two-layer MLP followed by L2 row normalization.  (n, d_f) -> (n, d_h)."""
    raw, mlp_cache = mlp_forward(head, z)
    h, norm_cache = l2_normalize_rows(raw, eps)
    return h, (mlp_cache, norm_cache)


def project_backward(dh: np.ndarray, head: Mlp, cache):
    mlp_cache, norm_cache = cache
    draw = l2_normalize_rows_backward(dh, norm_cache)
    dz, grads = mlp_backward(head, mlp_cache, draw)
    return dz, grads


def decode_skeleton(z: np.ndarray, params: ModelParams):
    """Map a feature batch back to skeleton blocks.  (n, d_f) -> (n, T, J, 3)."""
    d = params.dims
    flat, cache = mlp_forward(params.dec_s, z)
    return flat.reshape(-1, d.frames, d.joints, 3), cache


def decode_skeleton_backward(dx: np.ndarray, params: ModelParams, cache):
    n = dx.shape[0]
    dflat = dx.reshape(n, -1)
    dz, grads = mlp_backward(params.dec_s, cache, dflat)
    return dz, grads


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _init_mlp(shapes_acts, rng: np.random.Generator) -> Mlp:
    mlp = []
    for (fan_in, fan_out), act in shapes_acts:
        scale = np.sqrt((2.0 if act == "relu" else 1.0) / fan_in)
        w = rng.normal(0.0, scale, size=(fan_in, fan_out))
        mlp.append(Layer(w, np.zeros(fan_out), act))
    return mlp


def init_params(dims: ModelDims, seed: int) -> ModelParams:
    """He-style init for relu layers, 1/fan_in otherwise; biases zero except
    the gate bias, which starts at +1.0 so gates open near 0.73."""
    root = SplitRng(seed).child("init")

    def mlp(label, spec):
        return _init_mlp(spec, root.child(label).generator())

    d_f, d_h, hid = dims.feature_dim, dims.proj_dim, dims.hidden_dim
    enc_r = mlp("enc_r", [((dims.rgbd_dim, hid), "relu"), ((hid, d_f), "none")])
    enc_s = mlp("enc_s", [((dims.joints * 3, hid), "relu"), ((hid, d_f), "none")])
    enc_p = mlp("enc_p", [((3, hid // 2), "relu"), ((hid // 2, d_f), "none")])
    proj = lambda label: mlp(label, [((d_f, hid), "relu"), ((hid, d_h), "none")])
    dec_out = dims.frames * dims.joints * 3
    dec_s = mlp("dec_s", [((d_f, hid), "relu"), ((hid, dec_out), "none")])

    g_gate = root.child("gate").generator()
    gate_w = g_gate.normal(0.0, np.sqrt(1.0 / d_f), size=(3, d_f))
    gate_b = np.full(3, 1.0)
    g_cls = root.child("classifier").generator()
    cls_w = g_cls.normal(0.0, np.sqrt(1.0 / d_f), size=(d_f, dims.num_classes))
    cls_b = np.zeros(dims.num_classes)

    return ModelParams(
        dims, enc_r, enc_s, enc_p,
        proj("proj_r"), proj("proj_s"), proj("proj_p"), proj("proj_f"),
        dec_s, gate_w, gate_b, cls_w, cls_b,
    )


# ---------------------------------------------------------------------------
# checkpoint file: magic, u64 header length, JSON header, matrices in order
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, params: ModelParams, meta: dict | None = None):
    names, blobs = [], []
    for name, arr in params.named_arrays():
        names.append(name)
        blobs.append(matrix_to_bytes(arr.reshape(1, -1) if arr.ndim == 1 else arr))
    layer_specs = {
        mlp_name: [{"in": l.w.shape[0], "out": l.w.shape[1], "act": l.act}
                   for l in getattr(params, mlp_name)]
        for mlp_name in params.MLP_NAMES
    }
    header = {
        "format_version": 1,
        "dims": dataclasses.asdict(params.dims),
        "layers": layer_specs,
        "names": names,
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)
    import os
    os.replace(tmp, path)


def load_checkpoint(path: str):
    """Returns (ModelParams, meta dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (header_len,) = struct.unpack_from("<Q", blob, 4)
    header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    dims = ModelDims(**header["dims"])
    params = init_params(dims, seed=0)
    offset = 12 + header_len
    values = {}
    for name in header["names"]:
        m, offset = matrix_from_bytes(blob, offset)
        ref = params.get(name)
        values[name] = m.reshape(ref.shape)
    params.set_flat(values)
    return params, header.get("meta", {})
