"""Pointwise-MLP + max-pool point encoder with part, material, shape and
retrieval heads. Forward and backward passes are written out by hand.

Shapes in a batch are concatenated along the point axis; every per-shape
quantity (global feature, shape logits, prior row) is indexed by batch slot.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .data import LabeledShape, PointCloud

CHECKPOINT_MAGIC = b"C3CK"
CHECKPOINT_VERSION = 1
NORM_FLOOR = 1e-12

HEADS = ("part", "mat")


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class EncoderDims:
    n_shape: int
    d: int = 64
    h1: int = 64
    h2: int = 128
    head_hidden: int = 32
    prior_dim: int = 32
    in_dim: int = 6
    n_part: int = 0
    n_mat: int = 0

    def shapes(self) -> dict:
        """Parameter name -> array shape, in declaration order."""
        out = {
            "w1": (self.in_dim, self.h1), "b1": (self.h1,),
            "w2": (self.h1, self.h2), "b2": (self.h2,),
        }
        for h in HEADS:
            out.update({
                f"{h}_w_point": (self.h2, self.head_hidden),
                f"{h}_w_global": (self.h2, self.head_hidden),
                f"{h}_w_prior": (self.prior_dim, self.head_hidden),
                f"{h}_b1": (self.head_hidden,),
                f"{h}_w_out": (self.head_hidden, self.d),
                f"{h}_b_out": (self.d,),
            })
        out.update({
            "shape_w": (self.h2, self.n_shape), "shape_b": (self.n_shape,),
            "prior_table": (self.n_shape, self.prior_dim),
            "ret_w": (self.h2, self.d), "ret_b": (self.d,),
        })
        return out


class EncoderParams:
    """Named parameter tensors plus a version counter bumped on every update."""

    def __init__(self, dims: EncoderDims, arrays: dict):
        self.dims = dims
        expected = dims.shapes()
        if list(arrays) != list(expected):
            raise ValueError("parameter names/order do not match dims")
        for k, shp in expected.items():
            if arrays[k].shape != shp:
                raise ValueError(f"{k} has shape {arrays[k].shape}, expected {shp}")
        self.arrays = arrays
        self.version = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    @property
    def dtype(self):
        return self.arrays["w1"].dtype

    def astype(self, dtype) -> "EncoderParams":
        return EncoderParams(self.dims, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def copy(self) -> "EncoderParams":
        return self.astype(self.dtype)

    def zeros_like(self) -> "EncoderParams":
        return EncoderParams(self.dims, {k: np.zeros_like(v) for k, v in self.arrays.items()})

    def step(self, grads: "EncoderParams", lr: float) -> None:
        """In-place gradient-descent update."""
        for k, v in self.arrays.items():
            v -= v.dtype.type(lr) * grads.arrays[k]
        self.version += 1

    def sq_norm(self) -> float:
        return float(sum(np.sum(v.astype(np.float64) ** 2) for v in self.arrays.values()))

    def dot(self, other: "EncoderParams") -> float:
        return float(sum(np.sum(self.arrays[k].astype(np.float64) * other.arrays[k])
                         for k in self.arrays))

    def equals(self, other: "EncoderParams") -> bool:
        return self.dims == other.dims and all(
            self.arrays[k].dtype == other.arrays[k].dtype
            and np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)


ParamGrads = EncoderParams


def init_params(dims: EncoderDims, seed: int, dtype=np.float64) -> EncoderParams:
    """Weights ~ N(0, 1/fan_in), biases zero; drawn in float64 then cast."""
    rng = np.random.default_rng([int(seed), 7])
    arrays = {}
    for name, shp in dims.shapes().items():
        if len(shp) == 1:
            arrays[name] = np.zeros(shp, dtype=dtype)
        elif name == "prior_table":
            arrays[name] = rng.standard_normal(shp).astype(dtype)
        else:
            arrays[name] = (rng.standard_normal(shp) / np.sqrt(shp[0])).astype(dtype)
    return EncoderParams(dims, arrays)


@dataclass
class EncoderOutput:
    part_features: np.ndarray | None = None
    material_features: np.ndarray | None = None
    shape_logits: np.ndarray | None = None
    retrieval: np.ndarray | None = None
    offsets: np.ndarray | None = None

    def shape_slice(self, b: int) -> slice:
        return slice(int(self.offsets[b]), int(self.offsets[b + 1]))


@dataclass
class ShapeCache:
    x_t: np.ndarray
    h1_t: np.ndarray
    h2_t: np.ndarray
    argmax: np.ndarray
    hidden: np.ndarray
    norms: dict


@dataclass
class ForwardCache:
    params: EncoderParams
    version: int
    offsets: np.ndarray
    shapes: list
    g: np.ndarray
    classes: np.ndarray
    use_prior: bool
    prior_rows: np.ndarray | None
    features: dict
    ret_norm: np.ndarray
    ret_hat: np.ndarray


def _as_batch(shapes) -> list:
    if isinstance(shapes, (LabeledShape, PointCloud)):
        return [shapes]
    return list(shapes)


def _cloud(s) -> PointCloud:
    return s.cloud if isinstance(s, LabeledShape) else s


def trunk_forward(params: EncoderParams, x: np.ndarray):
    """Per-point trunk on one shape plus its max-pooled global feature.

    Activations are kept channel-major (channels x points) so the pooling
    reductions run over contiguous memory. argmax picks the lowest point
    index on ties.
    """
    p = params.arrays
    x_t = np.ascontiguousarray(x.T)
    h1_t = p["w1"].T @ x_t
    h1_t += p["b1"][:, None]
    np.maximum(h1_t, 0, out=h1_t)
    h2_t = p["w2"].T @ h1_t
    h2_t += p["b2"][:, None]
    np.maximum(h2_t, 0, out=h2_t)
    arg = h2_t.argmax(axis=1)
    g = h2_t[np.arange(h2_t.shape[0]), arg]
    return x_t, h1_t, h2_t, g, arg


def forward(params: EncoderParams, shapes, use_prior: bool = False):
    """Run the encoder on one shape or a batch of shapes.

    Returns ``(EncoderOutput, ForwardCache)``. Point features of all shapes
    are concatenated (unit rows); ``shape_logits`` and ``retrieval`` carry
    one row per shape.
    """
    batch = _as_batch(shapes)
    if not batch:
        raise ValueError("empty batch")
    dtype = params.dtype
    lengths = [len(_cloud(s)) for s in batch]
    if min(lengths) == 0:
        raise ValueError("cannot encode an empty point cloud")
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    if use_prior:
        if not all(isinstance(s, LabeledShape) for s in batch):
            raise ValueError("shape prior requires labeled shapes")
        classes = np.array([s.shape_class for s in batch], dtype=np.int64)
        if classes.min() < 0 or classes.max() >= params.dims.n_shape:
            raise ValueError("shape_class outside the prior table")
    else:
        classes = np.array([getattr(s, "shape_class", -1) for s in batch], dtype=np.int64)

    p = params.arrays
    n_total, d = int(offsets[-1]), params.dims.d
    feats = {h: np.empty((n_total, d), dtype=dtype) for h in HEADS}
    g_all = np.empty((len(batch), params.dims.h2), dtype=dtype)
    prior_rows = p["prior_table"][classes] if use_prior else None
    hh = params.dims.head_hidden
    # both heads' point projections run as one wider matmul
    w_point = np.concatenate([p[f"{h}_w_point"] for h in HEADS], axis=1)
    shape_caches = []
    # one shape at a time keeps the working set cache-resident
    for b, s in enumerate(batch):
        x_t, h1_t, h2_t, g, arg = trunk_forward(params, _cloud(s).features(dtype))
        g_all[b] = g
        shape_term = np.concatenate([g @ p[f"{h}_w_global"] + p[f"{h}_b1"] for h in HEADS])
        if use_prior:
            shape_term += np.concatenate([prior_rows[b] @ p[f"{h}_w_prior"] for h in HEADS])
        # hidden activations stay channel-major, like the trunk
        a_t = w_point.T @ h2_t
        a_t += shape_term[:, None]
        np.maximum(a_t, 0, out=a_t)
        norms = {}
        for i, h in enumerate(HEADS):
            v = a_t[i * hh:(i + 1) * hh].T @ p[f"{h}_w_out"]
            v += p[f"{h}_b_out"]
            norm = np.maximum(np.sqrt(np.einsum("ij,ij->i", v, v)), NORM_FLOOR)[:, None]
            np.multiply(v, 1.0 / norm, out=feats[h][offsets[b]:offsets[b + 1]])
            norms[h] = norm
        shape_caches.append(ShapeCache(x_t, h1_t, h2_t, arg, a_t, norms))

    logits = g_all @ p["shape_w"] + p["shape_b"]
    r = g_all @ p["ret_w"] + p["ret_b"]
    r_norm = np.maximum(np.linalg.norm(r, axis=1, keepdims=True), NORM_FLOOR)
    r_hat = r / r_norm
    cache = ForwardCache(params, params.version, offsets, shape_caches, g_all, classes,
                         use_prior, prior_rows, feats, r_norm, r_hat)
    out = EncoderOutput(feats["part"], feats["mat"], logits, r_hat, offsets)
    return out, cache


def _normalize_backward(df: np.ndarray, f: np.ndarray, norm: np.ndarray) -> np.ndarray:
    """Pull dL/d(v/|v|) back to dL/dv: (I - f f^T) df / |v| row by row."""
    radial = np.einsum("ij,ij->i", f, df)[:, None]
    out = f * radial
    np.subtract(df, out, out=out)
    out *= 1.0 / norm
    return out


def backward(params: EncoderParams, cache: ForwardCache, grad_output: EncoderOutput) -> ParamGrads:
    """Gradients of a scalar loss w.r.t. every parameter.

    ``grad_output`` holds dL/d(output) for any subset of the outputs; missing
    entries count as zero. Per-shape contributions are summed in batch order.
    """
    if cache.params is not params or cache.version != params.version:
        raise StaleCacheError("forward cache does not belong to these parameters")
    p = params.arrays
    dtype = params.dtype
    grads = params.zeros_like()
    gr = grads.arrays
    dg = np.zeros_like(cache.g)

    if grad_output.shape_logits is not None:
        dl = np.asarray(grad_output.shape_logits, dtype=dtype)
        gr["shape_w"] += cache.g.T @ dl
        gr["shape_b"] += dl.sum(axis=0)
        dg += dl @ p["shape_w"].T
    if grad_output.retrieval is not None:
        dr = _normalize_backward(np.asarray(grad_output.retrieval, dtype=dtype),
                                 cache.ret_hat, cache.ret_norm)
        gr["ret_w"] += cache.g.T @ dr
        gr["ret_b"] += dr.sum(axis=0)
        dg += dr @ p["ret_w"].T

    hh = params.dims.head_hidden
    w_point = np.concatenate([p[f"{h}_w_point"] for h in HEADS], axis=1)
    head_grads = {"part": grad_output.part_features, "mat": grad_output.material_features}
    any_head = any(df is not None for df in head_grads.values())
    for b, sc in enumerate(cache.shapes):
        sl = slice(int(cache.offsets[b]), int(cache.offsets[b + 1]))
        dg_b = dg[b].copy()
        dh2_t = None
        if any_head:
            da_t = np.zeros_like(sc.hidden)
            for i, h in enumerate(HEADS):
                df = head_grads[h]
                if df is None:
                    continue
                cols = slice(i * hh, (i + 1) * hh)
                dv = _normalize_backward(np.asarray(df[sl], dtype=dtype),
                                         cache.features[h][sl], sc.norms[h])
                gr[f"{h}_w_out"] += sc.hidden[cols] @ dv
                gr[f"{h}_b_out"] += dv.sum(axis=0)
                np.matmul(p[f"{h}_w_out"], dv.T, out=da_t[cols])
            da_t *= sc.hidden > 0
            dw = sc.h2_t @ da_t.T
            dh2_t = w_point @ da_t
            s_all = da_t.sum(axis=1)
            for i, h in enumerate(HEADS):
                cols = slice(i * hh, (i + 1) * hh)
                s = s_all[cols]
                gr[f"{h}_w_point"] += dw[:, cols]
                gr[f"{h}_w_global"] += np.outer(cache.g[b], s)
                gr[f"{h}_b1"] += s
                dg_b += p[f"{h}_w_global"] @ s
                if cache.use_prior:
                    gr[f"{h}_w_prior"] += np.outer(cache.prior_rows[b], s)
                    gr["prior_table"][cache.classes[b]] += p[f"{h}_w_prior"] @ s
        if dh2_t is None:
            dh2_t = np.zeros_like(sc.h2_t)
        # max-pool routes each global channel to its argmax point
        dh2_t[np.arange(dh2_t.shape[0]), sc.argmax] += dg_b
        dh2_t *= sc.h2_t > 0
        gr["w2"] += sc.h1_t @ dh2_t.T
        gr["b2"] += dh2_t.sum(axis=1)
        dh1_t = p["w2"] @ dh2_t
        dh1_t *= sc.h1_t > 0
        gr["w1"] += sc.x_t @ dh1_t.T
        gr["b1"] += dh1_t.sum(axis=1)
    return grads


def save_checkpoint(params: EncoderParams, path) -> None:
    d = params.dims
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<9I", d.in_dim, d.h1, d.h2, d.head_hidden, d.d, d.n_shape,
                             d.prior_dim, d.n_part, d.n_mat))
        for v in params.arrays.values():
            fh.write(v.astype("<f4").tobytes())


def load_checkpoint(path, dtype=np.float32) -> EncoderParams:
    raw = open(path, "rb").read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a C3CK checkpoint")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    in_dim, h1, h2, hh, d, n_shape, prior, n_part, n_mat = struct.unpack_from("<9I", raw, 6)
    dims = EncoderDims(n_shape=n_shape, d=d, h1=h1, h2=h2, head_hidden=hh, prior_dim=prior,
                       in_dim=in_dim, n_part=n_part, n_mat=n_mat)
    pos = 6 + 36
    arrays = {}
    for name, shp in dims.shapes().items():
        count = int(np.prod(shp))
        if pos + 4 * count > len(raw):
            raise ValueError(f"{path} is truncated")
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos) \
            .reshape(shp).astype(dtype)
        pos += 4 * count
    return EncoderParams(dims, arrays)
