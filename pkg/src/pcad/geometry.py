"""Point clouds, preprocessing, sampling and the on-disk XYZ[L] / manifest formats."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np


class CloudFormatError(ValueError):
    """Raised for unreadable or malformed cloud files and manifests."""


@dataclass(frozen=True)
class PointCloud:
    """W points in 3D with optional per-point part labels.

    Points are stored as a read-only ``(W, 3)`` float32 array.
    """

    points: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float32, copy=True)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (W, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("empty cloud")
        if not np.isfinite(pts).all():
            raise ValueError("non-finite coordinate in cloud")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            lab = np.array(self.labels, dtype=np.int64, copy=True).reshape(-1)
            if lab.shape[0] != pts.shape[0]:
                raise ValueError(f"{lab.shape[0]} labels for {pts.shape[0]} points")
            if (lab < 0).any():
                raise ValueError("negative part label")
            lab.setflags(write=False)
            object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None


def load_cloud(path) -> PointCloud:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"cloud file not found: {path}")
    rows = []
    ncols = None
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) not in (3, 4):
            raise CloudFormatError(f"{path}:{lineno}: expected 3 or 4 columns, got {len(tokens)}")
        if ncols is None:
            ncols = len(tokens)
        elif len(tokens) != ncols:
            raise CloudFormatError(f"{path}:{lineno}: inconsistent label column")
        try:
            row = [float(t) for t in tokens[:3]]
            if ncols == 4:
                label = float(tokens[3])
                if label != int(label):
                    raise ValueError(tokens[3])
                row.append(int(label))
        except ValueError as exc:
            raise CloudFormatError(f"{path}:{lineno}: non-numeric token ({exc})") from None
        rows.append(row)
    if not rows:
        raise CloudFormatError(f"{path}: empty cloud")
    arr = np.array(rows, dtype=np.float64)
    labels = arr[:, 3].astype(np.int64) if ncols == 4 else None
    return PointCloud(arr[:, :3], labels)


def save_cloud(cloud: PointCloud, path) -> None:
    """Write ``cloud`` as XYZ[L] text with 9 significant digits per coordinate."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    if cloud.labels is None:
        for x, y, z in cloud.points.tolist():
            lines.append(f"{x:.9g} {y:.9g} {z:.9g}")
    else:
        for (x, y, z), lab in zip(cloud.points.tolist(), cloud.labels.tolist()):
            lines.append(f"{x:.9g} {y:.9g} {z:.9g} {lab}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def sample_points(cloud: PointCloud, w: int, seed) -> PointCloud:
    """Draw ``w`` points uniformly; without replacement iff ``w <= len(cloud)``."""
    if w < 1:
        raise ValueError(f"sample count must be >= 1, got {w}")
    rng = np.random.default_rng(seed)
    n = len(cloud)
    idx = rng.choice(n, size=w, replace=w > n)
    labels = None if cloud.labels is None else cloud.labels[idx]
    return PointCloud(cloud.points[idx], labels)


def normalize_unit_sphere(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and scale so the farthest point has norm 1.

    A cloud whose points all coincide maps to the origin.
    """
    pts = cloud.points.astype(np.float64)
    pts = pts - pts.mean(axis=0)
    radius = np.sqrt((pts * pts).sum(axis=1)).max()
    if radius > 1e-12:
        pts = pts / radius
    else:
        pts = np.zeros_like(pts)
    return PointCloud(pts, cloud.labels)


def preprocess(cloud: PointCloud, w: Optional[int], seed) -> PointCloud:
    """Resample to ``w`` points (skipped when ``w`` is None) and normalize."""
    if w is not None:
        cloud = sample_points(cloud, w, seed)
    return normalize_unit_sphere(cloud)


def stack_points(clouds: Sequence[PointCloud]) -> np.ndarray:
    """Stack equally sized clouds into a ``(B, W, 3)`` batch."""
    sizes = {len(c) for c in clouds}
    if len(sizes) != 1:
        raise ValueError(f"clouds in a batch must have equal size, got {sorted(sizes)}")
    return np.stack([c.points for c in clouds])


@dataclass
class Category:
    id: int
    name: str
    num_parts: int
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    train_paths: list = field(default_factory=list)
    test_paths: list = field(default_factory=list)


@dataclass
class LabeledDataset:
    """Categories ``0..C-1``, each with train and test clouds.

    ``root`` is the directory cloud paths are relative to, when loaded from disk.
    """

    categories: list
    root: Optional[Path] = None

    def __post_init__(self):
        ids = [c.id for c in self.categories]
        if ids != list(range(len(ids))):
            raise ValueError(f"category ids must be 0..C-1 in order, got {ids}")
        names = [c.name for c in self.categories]
        if len(set(names)) != len(names):
            raise ValueError("duplicate category names")
        for cat in self.categories:
            if cat.num_parts < 1:
                raise ValueError(f"{cat.name}: num_parts must be >= 1")
            for cloud in (*cat.train, *cat.test):
                if cloud.labels is not None and cloud.labels.size and cloud.labels.max() >= cat.num_parts:
                    raise ValueError(f"{cat.name}: part label >= num_parts ({cat.num_parts})")

    def __iter__(self) -> Iterator[Category]:
        return iter(self.categories)

    def __len__(self) -> int:
        return len(self.categories)

    @property
    def names(self) -> list:
        return [c.name for c in self.categories]

    def category(self, key) -> Category:
        """Look a category up by id or name."""
        if isinstance(key, (int, np.integer)):
            return self.categories[int(key)]
        for cat in self.categories:
            if cat.name == key:
                return cat
        raise KeyError(f"unknown category {key!r}; known: {', '.join(self.names)}")

    @property
    def part_offsets(self) -> list:
        """Offset of each category's local part ids in the global label space."""
        offsets, total = [], 0
        for cat in self.categories:
            offsets.append(total)
            total += cat.num_parts
        return offsets

    @property
    def total_parts(self) -> int:
        return sum(c.num_parts for c in self.categories)

    def test_items(self):
        """Yield ``(category_id, relative_path, cloud)`` for every test cloud."""
        for cat in self.categories:
            paths = cat.test_paths or [f"{cat.name}/test_{i:03d}" for i in range(len(cat.test))]
            for rel, cloud in zip(paths, cat.test):
                yield cat.id, rel, cloud


def load_manifest(path) -> LabeledDataset:
    """Read a manifest and every cloud it lists (paths relative to the manifest)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CloudFormatError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("categories"), list):
        raise CloudFormatError(f"{path}: manifest needs a 'categories' list")
    root = path.parent
    cats = []
    for i, entry in enumerate(doc["categories"]):
        try:
            name, num_parts = str(entry["name"]), int(entry["num_parts"])
            train_paths, test_paths = list(entry.get("train", [])), list(entry.get("test", []))
        except (KeyError, TypeError, ValueError) as exc:
            raise CloudFormatError(f"{path}: bad category entry #{i} ({exc})") from None
        cats.append(
            Category(
                id=i,
                name=name,
                num_parts=num_parts,
                train=[load_cloud(root / p) for p in train_paths],
                test=[load_cloud(root / p) for p in test_paths],
                train_paths=train_paths,
                test_paths=test_paths,
            )
        )
    return LabeledDataset(cats, root=root)


def write_manifest(dataset: LabeledDataset, path) -> None:
    doc = {
        "categories": [
            {"name": c.name, "num_parts": c.num_parts, "train": list(c.train_paths), "test": list(c.test_paths)}
            for c in dataset
        ]
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbour distance between two point sets."""
    from scipy.spatial import cKDTree

    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(da.mean() + db.mean())


def rotation_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
