"""Seeded generator of labeled synthetic shape categories.

Each kind is sampled uniformly by surface area in a canonical frame, given a
per-axis stretch and a random rotation about the vertical (z) axis, jittered,
and normalized to the unit sphere.  Part labels come from a fixed geometric
rule per kind.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import (
    Category,
    LabeledDataset,
    PointCloud,
    chamfer_distance,
    normalize_unit_sphere,
    rotation_z,
    save_cloud,
    write_manifest,
)

KINDS = ("sphere", "box", "cylinder", "torus", "cone", "plane-cross")

PART_RULES = {
    "sphere": ("hemisphere", 2),
    "box": ("face axis", 3),
    "cylinder": ("side / top cap / bottom cap", 3),
    "torus": ("inner / outer ring", 2),
    "cone": ("upper mantle / lower mantle / base", 3),
    "plane-cross": ("sheet id", 2),
}


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    jitter_sigma: float = 0.01
    scale_range: tuple = (0.9, 1.1)
    rotation: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}; choose from {', '.join(KINDS)}")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be >= 0")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid scale_range {self.scale_range}")

    @property
    def part_rule(self) -> str:
        return PART_RULES[self.kind][0]

    @property
    def num_parts(self) -> int:
        return PART_RULES[self.kind][1]


def default_specs(n: int = 6) -> list:
    if not 1 <= n <= len(KINDS):
        raise ValueError(f"between 1 and {len(KINDS)} categories available, got {n}")
    return [ShapeSpec(k) for k in KINDS[:n]]


def _pick_by_area(rng, areas, w):
    p = np.asarray(areas, dtype=np.float64)
    return rng.choice(len(p), size=w, p=p / p.sum())


def _sphere(rng, w):
    v = rng.standard_normal((w, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v, (v[:, 2] < 0).astype(np.int64)


def _box(rng, w, half=(1.0, 0.6, 0.6)):
    a, b, c = half
    face_area = [b * c, a * c, a * b]  # faces normal to x, y, z (two each)
    axis = _pick_by_area(rng, face_area, w)
    pts = rng.uniform(-1, 1, (w, 3)) * np.array(half)
    sign = rng.choice([-1.0, 1.0], size=w)
    pts[np.arange(w), axis] = sign * np.array(half)[axis]
    return pts, axis.astype(np.int64)


def _cylinder(rng, w, r=0.5, h=1.0):
    part = _pick_by_area(rng, [2 * math.pi * r * 2 * h, math.pi * r * r, math.pi * r * r], w)
    theta = rng.uniform(0, 2 * math.pi, w)
    rad = np.where(part == 0, r, r * np.sqrt(rng.uniform(0, 1, w)))
    z = np.select([part == 0, part == 1], [rng.uniform(-h, h, w), np.full(w, h)], -h)
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1), part.astype(np.int64)


def _torus(rng, w, big=1.0, small=0.35):
    out = np.empty((0, 2))
    while len(out) < w:
        phi = rng.uniform(0, 2 * math.pi, 2 * w)
        keep = rng.uniform(0, big + small, 2 * w) < big + small * np.cos(phi)
        theta = rng.uniform(0, 2 * math.pi, 2 * w)
        out = np.concatenate([out, np.stack([theta[keep], phi[keep]], axis=1)])
    theta, phi = out[:w, 0], out[:w, 1]
    ring = big + small * np.cos(phi)
    pts = np.stack([ring * np.cos(theta), ring * np.sin(theta), small * np.sin(phi)], axis=1)
    return pts, (np.cos(phi) < 0).astype(np.int64)


def _cone(rng, w, r=0.8, h=1.6):
    slant = math.hypot(r, h)
    part = _pick_by_area(rng, [math.pi * r * slant, math.pi * r * r], w)
    theta = rng.uniform(0, 2 * math.pi, w)
    # mantle area density grows linearly with distance from the apex
    t = np.sqrt(rng.uniform(0, 1, w))
    rad = np.where(part == 0, r * t, r * np.sqrt(rng.uniform(0, 1, w)))
    z = np.where(part == 0, h / 2 - h * t, -h / 2)
    pts = np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)
    label = np.where(part == 1, 2, np.where(z > 0, 0, 1))
    return pts, label.astype(np.int64)


def _plane_cross(rng, w, half_len=1.0, half_height=0.6):
    sheet = rng.integers(0, 2, w)
    u = rng.uniform(-half_len, half_len, w)
    z = rng.uniform(-half_height, half_height, w)
    pts = np.where(sheet[:, None] == 0, np.stack([u, np.zeros(w), z], 1), np.stack([np.zeros(w), u, z], 1))
    return pts, sheet.astype(np.int64)


_SAMPLERS = {
    "sphere": _sphere,
    "box": _box,
    "cylinder": _cylinder,
    "torus": _torus,
    "cone": _cone,
    "plane-cross": _plane_cross,
}


def generate_cloud(spec: ShapeSpec, w: int, seed, nominal: bool = False) -> PointCloud:
    """One labeled, unit-sphere-normalized cloud; ``nominal`` skips pose and jitter."""
    rng = np.random.default_rng(seed)
    pts, labels = _SAMPLERS[spec.kind](rng, w)
    if not nominal:
        pts = pts * rng.uniform(*spec.scale_range, size=3)
        if spec.rotation:
            pts = pts @ rotation_z(rng.uniform(0, 2 * math.pi)).T
        pts = pts + rng.normal(0.0, spec.jitter_sigma, pts.shape) if spec.jitter_sigma > 0 else pts
    return normalize_unit_sphere(PointCloud(pts, labels))


def generate_dataset(
    specs: Sequence[ShapeSpec],
    n_train: int = 20,
    n_test: int = 30,
    w: int = 512,
    seed: int = 7,
    out_dir=None,
) -> LabeledDataset:
    """Generate every category; with ``out_dir`` also write XYZL files and ``manifest.json``."""
    if w < 16:
        raise ValueError("need at least 16 points per cloud")
    if n_train < 5:
        raise ValueError("need at least 5 training clouds per category")
    if n_test < 1:
        raise ValueError("need at least 1 test cloud per category")
    names = [s.kind for s in specs]
    if len(set(names)) != len(names):
        raise ValueError("duplicate shape kinds")
    cats = []
    for ci, spec in enumerate(specs):
        cat = Category(id=ci, name=spec.kind, num_parts=spec.num_parts)
        for split, count, tag in (("train", n_train, 0), ("test", n_test, 1)):
            for i in range(count):
                cloud = generate_cloud(spec, w, [seed, ci, tag, i])
                getattr(cat, split).append(cloud)
                getattr(cat, f"{split}_paths").append(f"{spec.kind}/{split}_{i:03d}.xyz")
        cats.append(cat)
    ds = LabeledDataset(cats)
    if out_dir is not None:
        out = Path(out_dir)
        for cat in ds:
            for split in ("train", "test"):
                for rel, cloud in zip(getattr(cat, f"{split}_paths"), getattr(cat, split)):
                    save_cloud(cloud, out / rel)
        write_manifest(ds, out / "manifest.json")
        ds.root = out
    return ds


def _aligned_chamfer(a: np.ndarray, b: np.ndarray, steps: int = 24) -> float:
    """Chamfer distance minimized over rotations of ``a`` about z."""
    return min(
        chamfer_distance(a @ rotation_z(2 * math.pi * k / steps).T, b) for k in range(steps)
    )


def self_test(specs: Sequence[ShapeSpec], w: int = 2048, seed: int = 7, n_probe: int = 5) -> dict:
    """Separability check: prototype distances versus within-category spread.

    Both use Chamfer distance minimized over rotations about z, so pose does
    not count as shape difference.  Probes use ``w`` points (2048 by default,
    above the benchmark's 512) to keep sampling noise out of the spread.
    Returns the worst-case ratio ``min inter-prototype distance / max mean
    intra-category distance``.
    """
    protos = [generate_cloud(s, w, [seed, ci, 9], nominal=True).points for ci, s in enumerate(specs)]
    intra = []
    for ci, spec in enumerate(specs):
        d = [_aligned_chamfer(generate_cloud(spec, w, [seed, ci, 8, i]).points, protos[ci]) for i in range(n_probe)]
        intra.append(float(np.mean(d)))
    inter = min(
        _aligned_chamfer(protos[i], protos[j])
        for i in range(len(specs))
        for j in range(len(specs))
        if i != j
    )
    worst = max(intra)
    return {"inter_min": inter, "intra": intra, "intra_max": worst, "ratio": inter / worst}
