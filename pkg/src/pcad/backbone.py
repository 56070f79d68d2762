"""PointNet-style feature extractor shared by teacher and student.

Layout for one cloud of W points::

    points -> align1 (3x3 transform) -> mlp1 (3->64->128->128) = f1 ---- max -> tap1
           -> align2 (128x128 transform) -> mlp2a (128->512) = h ------- max -> tap2
           -> mlp2b (512->2048, affine) = f2 ------------------------- max -> tap3
    [teacher only] seg head: concat(f1, h, tap3 broadcast) -> 256 -> 128 -> parts

Per-point layers are linear + batch normalization + ReLU.  Normalization uses
statistics over every point in the batch in ``train`` mode and the stored
running statistics in ``eval`` mode.  The last per-point layer is affine only,
so the reverse pass through the final max-pool touches one point per channel.

Everything is plain numpy; gradients are derived by hand in :func:`backward`.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import sparse

from . import kernels
from .geometry import PointCloud

GROUPS = ("align1", "mlp1", "align2", "mlp2a", "mlp2b", "seg")
CHECKPOINT_MAGIC = b"PCADCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BackboneConfig:
    """Layer widths.  ``mid=None`` drops the second tap (reduced students)."""

    mlp1: tuple = (64, 128, 128)
    mid: Optional[int] = 512
    out: int = 2048
    align_point: tuple = (64, 128, 1024)
    align_dense: tuple = (512, 256)
    seg_hidden: tuple = (256, 128)
    num_parts: Optional[int] = None
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        for key in ("mlp1", "align_point", "align_dense", "seg_hidden"):
            object.__setattr__(self, key, tuple(int(v) for v in getattr(self, key)))
        if self.mid is not None:
            object.__setattr__(self, "mid", int(self.mid))
        object.__setattr__(self, "out", int(self.out))
        if self.num_parts is not None:
            object.__setattr__(self, "num_parts", int(self.num_parts))
        self.validate()

    def validate(self):
        if not self.mlp1 or not self.align_point or not self.seg_hidden:
            raise ValueError("mlp1, align_point and seg_hidden need at least one layer")
        widths = [*self.mlp1, self.out, *self.align_point, *self.align_dense, *self.seg_hidden]
        if self.mid is not None:
            widths.append(self.mid)
        if any(w < 1 for w in widths):
            raise ValueError(f"invalid width configuration: every width must be >= 1 ({self})")
        if self.num_parts is not None and self.num_parts < 2:
            raise ValueError("segmentation head needs num_parts >= 2")
        if not 0 < self.bn_momentum <= 1 or self.bn_eps <= 0:
            raise ValueError("bn_momentum must be in (0, 1] and bn_eps > 0")

    @property
    def tap_widths(self) -> tuple:
        return (self.mlp1[-1], self.mid, self.out)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)

    def without_seg_head(self) -> "BackboneConfig":
        return BackboneConfig(**{**self.to_dict(), "num_parts": None})


def _layout(cfg: BackboneConfig):
    """Yield ``(name, shape, init)`` for every trainable array, in declared order.

    Units named in ``_bn_units`` additionally own running statistics.
    """

    def unit(prefix, cin, cout):
        yield f"{prefix}.w", (cin, cout), "he"
        yield f"{prefix}.gamma", (cout,), "ones"
        yield f"{prefix}.beta", (cout,), "zeros"

    def tnet(prefix, k):
        cin = k
        for i, w in enumerate(cfg.align_point):
            yield from unit(f"{prefix}.conv{i}", cin, w)
            cin = w
        for i, w in enumerate(cfg.align_dense):
            yield f"{prefix}.fc{i}.w", (cin, w), "he"
            yield f"{prefix}.fc{i}.b", (w,), "zeros"
            cin = w
        yield f"{prefix}.out.w", (cin, k * k), "zeros"
        yield f"{prefix}.out.b", (k * k,), "identity"

    h1 = cfg.mlp1[-1]
    yield from tnet("align1", 3)
    cin = 3
    for i, w in enumerate(cfg.mlp1):
        yield from unit(f"mlp1.conv{i}", cin, w)
        cin = w
    yield from tnet("align2", h1)
    cin = h1
    if cfg.mid is not None:
        yield from unit("mlp2a", h1, cfg.mid)
        cin = cfg.mid
    yield "mlp2b.w", (cin, cfg.out), "lecun"
    yield "mlp2b.b", (cfg.out,), "zeros"
    if cfg.num_parts is not None:
        local = h1 + (cfg.mid or 0)
        s0 = cfg.seg_hidden[0]
        yield "seg.conv0.w", (local, s0), "he"
        yield "seg.conv0.wg", (cfg.out, s0), "he_global"
        yield "seg.conv0.gamma", (s0,), "ones"
        yield "seg.conv0.beta", (s0,), "zeros"
        cin = s0
        for i, w in enumerate(cfg.seg_hidden[1:], 1):
            yield from unit(f"seg.conv{i}", cin, w)
            cin = w
        yield "seg.out.w", (cin, cfg.num_parts), "lecun"
        yield "seg.out.b", (cfg.num_parts,), "zeros"


def _bn_units(cfg: BackboneConfig) -> list:
    return [name[: -len(".gamma")] for name, _, _ in _layout(cfg) if name.endswith(".gamma")]


def param_shapes(cfg: BackboneConfig) -> dict:
    return {name: shape for name, shape, _ in _layout(cfg)}


def group_of(name: str) -> str:
    return name.split(".", 1)[0]


@dataclass
class BackboneParams:
    """All weights and normalization statistics of one network.

    ``meta`` carries JSON-serializable provenance (role, training config,
    teacher digest) and travels with the checkpoint.
    """

    config: BackboneConfig
    weights: dict
    stats: dict
    meta: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.weights.values())).dtype

    @property
    def has_seg_head(self) -> bool:
        return self.config.num_parts is not None

    def copy(self) -> "BackboneParams":
        return BackboneParams(
            self.config,
            {k: v.copy() for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.stats.items()},
            json.loads(json.dumps(self.meta)),
        )

    def digest(self) -> str:
        """SHA-256 over config, weights and statistics (not ``meta``)."""
        h = hashlib.sha256()
        h.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for table in (self.weights, self.stats):
            for name in sorted(table):
                arr = np.ascontiguousarray(table[name])
                h.update(f"{name}|{arr.dtype.str}|{arr.shape}".encode())
                h.update(arr.tobytes())
        return h.hexdigest()

    def without_seg_head(self) -> "BackboneParams":
        cfg = self.config.without_seg_head()
        keep = param_shapes(cfg)
        units = set(_bn_units(cfg))
        return BackboneParams(
            cfg,
            {k: v.copy() for k, v in self.weights.items() if k in keep},
            {k: v.copy() for k, v in self.stats.items() if k.rsplit(".", 1)[0] in units},
            json.loads(json.dumps(self.meta)),
        )


def init_params(config: BackboneConfig, seed, dtype=np.float32) -> BackboneParams:
    """Seeded initialization; alignment modules start as exact identity maps."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape, kind in _layout(config):
        if kind in ("he", "he_global"):
            arr = rng.standard_normal(shape) * np.sqrt(2.0 / shape[0])
            if kind == "he_global":
                arr *= 0.5
        elif kind == "lecun":
            arr = rng.standard_normal(shape) * np.sqrt(1.0 / shape[0])
        elif kind == "ones":
            arr = np.ones(shape)
        elif kind == "zeros":
            arr = np.zeros(shape)
        elif kind == "identity":
            k = int(round(np.sqrt(shape[0])))
            arr = np.eye(k).reshape(-1)
        else:  # pragma: no cover
            raise AssertionError(kind)
        weights[name] = arr.astype(dtype)
    stats = {}
    for unit in _bn_units(config):
        width = weights[f"{unit}.gamma"].shape[0]
        stats[f"{unit}.mean"] = np.zeros(width, dtype=dtype)
        stats[f"{unit}.var"] = np.ones(width, dtype=dtype)
    return BackboneParams(config, weights, stats, {})


@dataclass
class TapFeatures:
    """Max-pooled features at the three distillation positions, shape ``(B, h_i)``.

    ``f2`` is None for students built without the middle tap.
    """

    f1: np.ndarray
    f2: Optional[np.ndarray]
    f3: np.ndarray

    def as_tuple(self) -> tuple:
        return (self.f1, self.f2, self.f3)

    @property
    def widths(self) -> tuple:
        return tuple(None if f is None else f.shape[-1] for f in self.as_tuple())

    def __getitem__(self, i) -> "TapFeatures":
        """Select clouds from the batch."""
        return TapFeatures(*(None if f is None else f[i] for f in self.as_tuple()))

    @staticmethod
    def concat(parts: Sequence["TapFeatures"]) -> "TapFeatures":
        cols = list(zip(*(p.as_tuple() for p in parts)))
        return TapFeatures(*(None if col[0] is None else np.concatenate(col) for col in cols))


@dataclass
class ForwardTrace:
    f1: np.ndarray
    f2: Optional[np.ndarray]  # train mode only
    taps: TapFeatures
    seg_logits: Optional[np.ndarray]
    align_mats: tuple
    mode: str
    batch_stats: dict = field(default_factory=dict, repr=False)
    cache: dict = field(default_factory=dict, repr=False)


@dataclass
class LossGrad:
    """Upstream gradients w.r.t. forward outputs; any field may be None."""

    taps: Optional[tuple] = None
    seg_logits: Optional[np.ndarray] = None
    align2: Optional[np.ndarray] = None


def _check(name, arr, what="activation"):
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite {what} in layer {name}")


def _as_batch(cloud, dtype) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        pts = cloud.points[None]
    else:
        pts = np.asarray(cloud)
        if pts.ndim == 2:
            pts = pts[None]
    if pts.ndim != 3 or pts.shape[2] != 3:
        raise ValueError(f"expected (W, 3) or (B, W, 3) points, got {pts.shape}")
    return np.ascontiguousarray(pts, dtype=dtype)


class _Net:
    """One forward (and optionally reverse) pass over a fixed batch."""

    def __init__(self, params: BackboneParams, train: bool):
        self.p = params.weights
        self.s = params.stats
        self.cfg = params.config
        self.train = train
        self.cache = {}
        self.batch_stats = {}

    # units: x @ w -> batch norm -> relu ------------------------------------

    def bn_relu(self, name, z):
        g, b = self.p[f"{name}.gamma"], self.p[f"{name}.beta"]
        eps = self.cfg.bn_eps
        z = np.ascontiguousarray(z)
        if self.train:
            y, xhat, inv, mu, var = kernels.bn_train(z, g, b, eps, True)
            self.batch_stats[name] = (mu, var)
            self.cache[name] = (y, xhat, inv)
        else:
            y = kernels.bn_eval(z, self.s[f"{name}.mean"], self.s[f"{name}.var"], g, b, eps, True)
        _check(name, y)
        return y

    def bn_relu_back(self, name, dy, grads):
        y, xhat, inv = self.cache.pop(name)
        dz, dgamma, dbeta = kernels.bn_backward(
            np.ascontiguousarray(dy), y, xhat, self.p[f"{name}.gamma"], inv, True
        )
        if grads is not None:
            grads[f"{name}.gamma"] = dgamma
            grads[f"{name}.beta"] = dbeta
        return dz

    def unit(self, name, x):
        if self.train:
            self.cache[f"{name}.in"] = x
        return self.bn_relu(name, x @ self.p[f"{name}.w"])

    def unit_back(self, name, dy, grads, need_input=True):
        dz = self.bn_relu_back(name, dy, grads)
        x = self.cache.pop(f"{name}.in")
        if grads is not None:
            grads[f"{name}.w"] = x.T @ dz
        return dz @ self.p[f"{name}.w"].T if need_input else None

    # pooling ---------------------------------------------------------------

    def maxpool(self, x3):
        if not self.train:  # winners are only needed by the reverse pass
            return x3.max(axis=1), None
        return kernels.max_pool(np.ascontiguousarray(x3))

    @staticmethod
    def maxpool_back(dpool, idx, shape):
        dx = np.zeros(shape, dtype=dpool.dtype)
        np.put_along_axis(dx, idx[:, None, :], dpool[:, None, :], axis=1)
        return dx

    # alignment modules -----------------------------------------------------

    def tnet(self, prefix, x3):
        B, W, k = x3.shape
        h = x3.reshape(B * W, k)
        for i in range(len(self.cfg.align_point)):
            h = self.unit(f"{prefix}.conv{i}", h)
        g, idx = self.maxpool(h.reshape(B, W, -1))
        acts = [g]
        for i in range(len(self.cfg.align_dense)):
            g = np.maximum(g @ self.p[f"{prefix}.fc{i}.w"] + self.p[f"{prefix}.fc{i}.b"], 0)
            acts.append(g)
        t = (g @ self.p[f"{prefix}.out.w"] + self.p[f"{prefix}.out.b"]).reshape(B, k, k)
        _check(prefix, t)
        if self.train:
            self.cache[prefix] = (acts, idx, (B, W, h.shape[1]))
        return t

    def tnet_back(self, prefix, dt, grads, need_input=True):
        acts, idx, pooled_shape = self.cache.pop(prefix)
        B, k, _ = dt.shape
        dt = dt.reshape(B, k * k)
        if grads is not None:
            grads[f"{prefix}.out.w"] = acts[-1].T @ dt
            grads[f"{prefix}.out.b"] = dt.sum(axis=0)
        dg = dt @ self.p[f"{prefix}.out.w"].T
        for i in reversed(range(len(self.cfg.align_dense))):
            dg = dg * (acts[i + 1] > 0)
            if grads is not None:
                grads[f"{prefix}.fc{i}.w"] = acts[i].T @ dg
                grads[f"{prefix}.fc{i}.b"] = dg.sum(axis=0)
            dg = dg @ self.p[f"{prefix}.fc{i}.w"].T
        B_, W, C = pooled_shape
        dh = self.maxpool_back(dg, idx, pooled_shape).reshape(B_ * W, C)
        n = len(self.cfg.align_point)
        for i in reversed(range(n)):
            dh = self.unit_back(f"{prefix}.conv{i}", dh, grads, need_input=need_input or i > 0)
        return None if dh is None else dh.reshape(B_, W, k)


def _use(grads, frozen, group):
    return None if group in frozen else grads


def forward(params: BackboneParams, cloud, mode: str = "eval") -> ForwardTrace:
    """Run the backbone on one cloud or a ``(B, W, 3)`` batch.

    In ``train`` mode batch-norm statistics are computed over all ``B*W``
    points and everything needed by :func:`backward` is cached on the trace.
    Parameters are never mutated; see :func:`update_norm_stats`.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    cfg = params.config
    pts = _as_batch(cloud, params.dtype)
    B, W, _ = pts.shape
    if train and B * W < 2:
        raise ValueError("train mode needs at least 2 points for normalization statistics")
    net = _Net(params, train)
    p = params.weights

    t1 = net.tnet("align1", pts)
    x = np.matmul(pts, t1).reshape(B * W, 3)
    for i in range(len(cfg.mlp1)):
        x = net.unit(f"mlp1.conv{i}", x)
    f1 = x.reshape(B, W, -1)
    tap1, idx1 = net.maxpool(f1)

    t2 = net.tnet("align2", f1)
    g = np.matmul(f1, t2).reshape(B * W, -1)
    _check("align2.apply", g)
    tap2 = idx2 = h = None
    if cfg.mid is not None:
        h = net.unit("mlp2a", g)
        tap2, idx2 = net.maxpool(h.reshape(B, W, -1))
        xin = h
    else:
        xin = g
    f2 = (xin @ p["mlp2b.w"]).reshape(B, W, -1)
    if train:
        f2 += p["mlp2b.b"]
        _check("mlp2b", f2)
        tap3, idx3 = net.maxpool(f2)
    else:
        # rounding is monotone, so max(z) + b == max(z + b) exactly
        tap3, idx3 = f2.max(axis=1) + p["mlp2b.b"], None
        f2 = None
        _check("mlp2b", tap3)

    seg_logits = None
    if cfg.num_parts is not None:
        local = f1.reshape(B * W, -1) if h is None else np.concatenate([f1.reshape(B * W, -1), h], axis=1)
        z = local @ p["seg.conv0.w"] + np.repeat(tap3 @ p["seg.conv0.wg"], W, axis=0)
        s = net.bn_relu("seg.conv0", z)
        for i in range(1, len(cfg.seg_hidden)):
            s = net.unit(f"seg.conv{i}", s)
        seg_logits = (s @ p["seg.out.w"] + p["seg.out.b"]).reshape(B, W, -1)
        _check("seg.out", seg_logits)
        if train:
            net.cache["seg"] = (local, s)

    if train:
        net.cache.update(
            pts=pts, t1=t1, f1=f1, t2=t2, idx1=idx1, idx2=idx2, idx3=idx3, xin=xin, shape=(B, W)
        )
    return ForwardTrace(
        f1=f1,
        f2=f2,
        taps=TapFeatures(tap1, tap2, tap3),
        seg_logits=seg_logits,
        align_mats=(t1, t2),
        mode=mode,
        batch_stats=net.batch_stats,
        cache={"net": net} if train else {},
    )


def backward(params: BackboneParams, trace: ForwardTrace, loss_grad: LossGrad, frozen=()) -> dict:
    """Reverse pass: gradients for every weight outside the ``frozen`` groups.

    Consumes the trace's cache, so each trace supports one backward call.
    """
    if trace.mode != "train" or "net" not in trace.cache:
        raise ValueError("backward needs an unconsumed trace from forward(..., mode='train')")
    frozen = set(frozen)
    unknown = frozen - set(GROUPS)
    if unknown:
        raise ValueError(f"unknown parameter groups {sorted(unknown)}")
    net = trace.cache.pop("net")
    c = net.cache
    cfg = params.config
    p = params.weights
    B, W = c["shape"]
    dtype = params.dtype
    grads = {}

    d_taps = list(loss_grad.taps) if loss_grad.taps is not None else [None, None, None]
    d_taps = [None if d is None else np.asarray(d, dtype=dtype).reshape(B, -1) for d in d_taps]
    d_f1 = np.zeros((B * W, cfg.mlp1[-1]), dtype=dtype)
    d_h = None if cfg.mid is None else np.zeros((B * W, cfg.mid), dtype=dtype)

    if loss_grad.seg_logits is not None:
        if cfg.num_parts is None:
            raise ValueError("seg_logits gradient given but network has no segmentation head")
        sg = _use(grads, frozen, "seg")
        local, s = c.pop("seg")
        dl = np.asarray(loss_grad.seg_logits, dtype=dtype).reshape(B * W, -1)
        if sg is not None:
            sg["seg.out.w"] = s.T @ dl
            sg["seg.out.b"] = dl.sum(axis=0)
        ds = dl @ p["seg.out.w"].T
        for i in reversed(range(1, len(cfg.seg_hidden))):
            ds = net.unit_back(f"seg.conv{i}", ds, sg)
        dz = net.bn_relu_back("seg.conv0", ds, sg)
        dz_sum = dz.reshape(B, W, -1).sum(axis=1)
        if sg is not None:
            sg["seg.conv0.w"] = local.T @ dz
            sg["seg.conv0.wg"] = trace.taps.f3.T @ dz_sum
        d_local = dz @ p["seg.conv0.w"].T
        h1 = cfg.mlp1[-1]
        d_f1 += d_local[:, :h1]
        if d_h is not None:
            d_h += d_local[:, h1:]
        d_glob = dz_sum @ p["seg.conv0.wg"].T
        d_taps[2] = d_glob if d_taps[2] is None else d_taps[2] + d_glob

    # final affine layer: only the argmax point of each channel receives gradient
    xin = c["xin"]
    d_xin = None
    if d_taps[2] is not None:
        d3 = d_taps[2]
        idx3 = c["idx3"]
        if "mlp2b" not in frozen:
            gathered = xin.reshape(B, W, -1)[np.arange(B)[:, None], idx3]
            grads["mlp2b.w"] = np.einsum("boc,bo->co", gathered, d3)
            grads["mlp2b.b"] = d3.sum(axis=0)
        rows = (np.arange(B)[:, None] * W + idx3).ravel()
        cols = np.tile(np.arange(cfg.out), B)
        scatter = sparse.csr_matrix((d3.ravel(), (rows, cols)), shape=(B * W, cfg.out))
        d_xin = np.asarray(scatter @ p["mlp2b.w"].T, dtype=dtype)
    elif "mlp2b" not in frozen:
        grads["mlp2b.w"] = np.zeros_like(p["mlp2b.w"])
        grads["mlp2b.b"] = np.zeros_like(p["mlp2b.b"])

    if cfg.mid is not None:
        if d_xin is not None:
            d_h += d_xin
        if d_taps[1] is not None:
            d_h += net.maxpool_back(d_taps[1], c["idx2"], (B, W, cfg.mid)).reshape(B * W, -1)
        d_g = net.unit_back("mlp2a", d_h, _use(grads, frozen, "mlp2a"))
    else:
        d_g = d_xin if d_xin is not None else np.zeros((B * W, cfg.mlp1[-1]), dtype=dtype)

    f1, t2 = c["f1"], c["t2"]
    d_g3 = d_g.reshape(B, W, -1)
    d_f1 += np.matmul(d_g3, t2.transpose(0, 2, 1)).reshape(B * W, -1)
    d_t2 = np.matmul(f1.transpose(0, 2, 1), d_g3)
    if loss_grad.align2 is not None:
        d_t2 = d_t2 + np.asarray(loss_grad.align2, dtype=dtype).reshape(d_t2.shape)
    d_f1 += net.tnet_back("align2", d_t2, _use(grads, frozen, "align2")).reshape(B * W, -1)

    if d_taps[0] is not None:
        d_f1 += net.maxpool_back(d_taps[0], c["idx1"], f1.shape).reshape(B * W, -1)
    dx = d_f1
    mg = _use(grads, frozen, "mlp1")
    for i in reversed(range(len(cfg.mlp1))):
        dx = net.unit_back(f"mlp1.conv{i}", dx, mg)
    pts = c["pts"]
    d_t1 = np.matmul(pts.transpose(0, 2, 1), dx.reshape(B, W, 3))
    if "align1" not in frozen:
        net.tnet_back("align1", d_t1, grads, need_input=False)

    for name, g in grads.items():
        _check(name, g, "gradient")
    return grads


def update_norm_stats(params: BackboneParams, trace: ForwardTrace, momentum: Optional[float] = None):
    """Fold a train-mode trace's batch statistics into the running statistics.

    ``momentum=1`` replaces them outright.
    """
    m = params.config.bn_momentum if momentum is None else momentum
    for name, (mu, var) in trace.batch_stats.items():
        rm, rv = params.stats[f"{name}.mean"], params.stats[f"{name}.var"]
        rm *= 1 - m
        rm += m * mu
        rv *= 1 - m
        rv += m * var


def extract_taps(params: BackboneParams, batch: np.ndarray, chunk: int = 16) -> TapFeatures:
    """Eval-mode taps for a ``(B, W, 3)`` batch, computed ``chunk`` clouds at a time."""
    parts = [forward(params, batch[i : i + chunk], "eval").taps for i in range(0, len(batch), chunk)]
    return TapFeatures.concat(parts)


# checkpoints ---------------------------------------------------------------


def save_checkpoint(params: BackboneParams, path) -> None:
    """Write a self-describing binary checkpoint (JSON header + raw arrays).

    Byte output depends only on the parameters, so reruns are bitwise equal.
    """
    entries, blobs, offset = [], [], 0
    for kind, table in (("weight", params.weights), ("stat", params.stats)):
        for name in table:
            arr = np.ascontiguousarray(table[name])
            data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            entries.append(
                {"name": name, "kind": kind, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                 "offset": offset, "nbytes": len(data)}
            )
            blobs.append(data)
            offset += len(data)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "meta": params.meta,
        "arrays": entries,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> BackboneParams:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    cfg = BackboneConfig.from_dict(header["config"])
    weights, stats = {}, {}
    for e in header["arrays"]:
        start = pos + e["offset"]
        arr = np.frombuffer(raw[start : start + e["nbytes"]], dtype=np.dtype(e["dtype"]).newbyteorder("<"))
        arr = arr.astype(np.dtype(e["dtype"])).reshape(e["shape"])
        (weights if e["kind"] == "weight" else stats)[e["name"]] = arr
    expected = param_shapes(cfg)
    if set(weights) != set(expected):
        missing, extra = set(expected) - set(weights), set(weights) - set(expected)
        raise ValueError(f"{path}: parameter set mismatch (missing {sorted(missing)}, extra {sorted(extra)})")
    for name, shape in expected.items():
        if tuple(weights[name].shape) != tuple(shape):
            raise ValueError(f"{path}: {name} has shape {weights[name].shape}, config expects {shape}")
    for unit in _bn_units(cfg):
        width = expected[f"{unit}.gamma"][0]
        for suffix in ("mean", "var"):
            arr = stats.get(f"{unit}.{suffix}")
            if arr is None or arr.shape != (width,):
                raise ValueError(f"{path}: bad normalization statistics for {unit}")
    ordered = {name: weights[name] for name in expected}
    return BackboneParams(cfg, ordered, stats, header.get("meta", {}))
