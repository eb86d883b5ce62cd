"""Point-cloud container, synthetic scenes, preprocessing and the mIoU metric."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "PointCloud",
    "SceneSpec",
    "AugmentConfig",
    "generate_scene",
    "augment",
    "clipped_jitter",
    "fnv1a_64",
    "fnv1a_64_rows",
    "grid_sample",
    "miou",
    "iou_per_class",
    "write_text",
    "read_text",
    "write_binary",
    "read_binary",
]

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

SHAPES = ("clusters", "circle", "torus-slice", "planes+objects")


@dataclass
class PointCloud:
    coords: np.ndarray
    intensity: np.ndarray | None = None
    labels: np.ndarray | None = None
    n_classes: int | None = None
    topology: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"coords must be N x 3, got shape {self.coords.shape}")
        if self.coords.shape[0] < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("coords contain non-finite values")
        n = self.coords.shape[0]
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if self.intensity.shape[0] != n:
                raise ValueError("intensity length does not match number of points")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.shape[0] != n:
                raise ValueError("labels length does not match number of points")
            if self.labels.min() < 0:
                raise ValueError("labels must be non-negative")
            if self.n_classes is None:
                self.n_classes = int(self.labels.max()) + 1
            elif self.labels.max() >= self.n_classes:
                raise ValueError(f"label {self.labels.max()} out of range for K={self.n_classes}")

    def __len__(self):
        return self.coords.shape[0]

    def take(self, index) -> "PointCloud":
        index = np.asarray(index)
        return PointCloud(
            self.coords[index],
            None if self.intensity is None else self.intensity[index],
            None if self.labels is None else self.labels[index],
            self.n_classes,
            dict(self.topology),
        )

    def with_coords(self, coords) -> "PointCloud":
        return PointCloud(coords, self.intensity, self.labels, self.n_classes, dict(self.topology))


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for a synthetic labelled scene.

    ``params`` holds the shape-specific geometry; see :func:`generate_scene`
    for the keys each shape understands. Identical specs always produce
    identical clouds.
    """

    shape: str
    n_classes: int = 2
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown scene shape {self.shape!r}; expected one of {SHAPES}")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")

    def to_dict(self):
        return {"shape": self.shape, "n_classes": self.n_classes, "seed": self.seed,
                "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["shape"], int(d.get("n_classes", 2)), int(d.get("seed", 0)),
                   dict(d.get("params", {})))


@dataclass(frozen=True)
class AugmentConfig:
    rotate_degrees: float = 1.0
    rotate_prob: float = 0.5
    scale_range: tuple = (0.9, 1.1)
    flip_prob: float = 0.5
    jitter_sigma: float = 0.005
    jitter_clip: float = 0.02

    def __post_init__(self):
        for name in ("rotate_prob", "flip_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        lo, hi = self.scale_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"scale_range must be positive and ordered, got {self.scale_range}")
        if self.jitter_clip < 0 or self.jitter_sigma < 0:
            raise ValueError("jitter sigma and clip must be non-negative")

    @classmethod
    def identity(cls):
        return cls(rotate_prob=0.0, scale_range=(1.0, 1.0), flip_prob=0.0, jitter_sigma=0.0)


# ---------------------------------------------------------------------------
# scenes


def _ball(rng, n, radius):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.uniform(size=(n, 1)) ** (1.0 / 3.0)
    return d * r


def _sector_labels(theta, k):
    frac = np.mod(theta, 2 * np.pi) / (2 * np.pi)
    return np.minimum((frac * k).astype(np.int64), k - 1)


def _clusters(spec, rng):
    p = spec.params
    k = int(p.get("k", spec.n_classes))
    n_per = int(p.get("n_per_cluster", 32))
    radius = float(p.get("radius", 0.1))
    sep = float(p.get("separation", 1.0))
    if k < 1 or n_per < 1 or radius <= 0:
        raise ValueError("clusters need k >= 1, n_per_cluster >= 1 and radius > 0")
    if k > 1 and sep <= 4 * radius:
        raise ValueError("clusters are not well separated: need separation > 4 * radius")
    # regular polygon whose side length is the separation
    circum = sep / (2 * math.sin(math.pi / k)) if k > 1 else 0.0
    coords, labels = [], []
    for j in range(k):
        a = 2 * math.pi * j / k
        center = np.array([circum * math.cos(a), circum * math.sin(a), 0.0])
        coords.append(center + _ball(rng, n_per, radius))
        labels.append(np.full(n_per, j % spec.n_classes))
    topo = {
        "betti": [k, 0, 0],
        "scale": 2 * radius,
        "per_label": {c: [len(range(c, k, spec.n_classes)), 0, 0] for c in range(min(k, spec.n_classes))},
    }
    return np.concatenate(coords), np.concatenate(labels), topo


def _circle(spec, rng):
    p = spec.params
    r = float(p.get("radius", 1.0))
    n = int(p.get("n", 64))
    noise = float(p.get("noise", 0.0))
    if r <= 0 or n < 3:
        raise ValueError("circle needs radius > 0 and n >= 3")
    theta = 2 * np.pi * np.arange(n) / n + rng.uniform(0, 2 * np.pi)
    xyz = np.stack([r * np.cos(theta), r * np.sin(theta), np.zeros(n)], axis=1)
    if noise > 0:
        xyz += rng.normal(scale=noise, size=xyz.shape)
    spacing = 2 * r * math.sin(math.pi / n)
    # VR(circle samples) stays a circle up to the side of the inscribed equilateral triangle
    topo = {"betti": [1, 1, 0], "scale_range": [spacing, r * math.sqrt(3)],
            "per_label": {c: [1, 0, 0] for c in range(spec.n_classes)} if spec.n_classes > 1
            else {0: [1, 1, 0]}}
    return xyz, _sector_labels(theta, spec.n_classes), topo


def _torus_slice(spec, rng):
    p = spec.params
    big = float(p.get("R", 1.0))
    small = float(p.get("r", 0.3))
    n = int(p.get("n", 256))
    if big <= 0 or small <= 0 or small >= big or n < 8:
        raise ValueError("torus-slice needs 0 < r < R and n >= 8")
    # upper half of the tube: an annulus, homotopy equivalent to a circle
    theta = rng.uniform(0, 2 * np.pi, n)
    phi = rng.uniform(0, np.pi, n)
    ring = big + small * np.cos(phi)
    xyz = np.stack([ring * np.cos(theta), ring * np.sin(theta), small * np.sin(phi)], axis=1)
    topo = {"betti": [1, 1, 0],
            "per_label": {c: [1, 0, 0] for c in range(spec.n_classes)} if spec.n_classes > 1
            else {0: [1, 1, 0]}}
    return xyz, _sector_labels(theta, spec.n_classes), topo


def _planes_objects(spec, rng):
    """Ground plane, a back wall, spheres and vertical poles.

    Classes are 0 ground, 1 wall, 2 sphere, 3 pole (clipped to ``n_classes``).
    """
    p = spec.params
    extent = float(p.get("extent", 2.0))
    n_ground = int(p.get("n_ground", 96))
    n_wall = int(p.get("n_wall", 64))
    n_spheres = int(p.get("n_spheres", 2))
    n_poles = int(p.get("n_poles", 2))
    n_obj = int(p.get("n_per_object", 24))
    sphere_r = float(p.get("sphere_radius", 0.25))
    pole_r = float(p.get("pole_radius", 0.08))
    pole_h = float(p.get("pole_height", 0.8))
    if extent <= 0 or sphere_r <= 0 or pole_r <= 0 or pole_h <= 0:
        raise ValueError("planes+objects needs positive extent and object sizes")
    k = spec.n_classes
    coords, labels = [], []
    ground = np.column_stack([rng.uniform(-extent, extent, (n_ground, 2)), np.zeros(n_ground)])
    coords.append(ground)
    labels.append(np.zeros(n_ground, dtype=np.int64))
    wall_x = extent + 0.2
    wall = np.column_stack([np.full(n_wall, wall_x), rng.uniform(-extent, extent, n_wall),
                            rng.uniform(0.0, 1.2, n_wall)])
    coords.append(wall)
    labels.append(np.full(n_wall, min(1, k - 1)))
    lim = extent - 0.4
    for _ in range(n_spheres):
        c = np.array([*rng.uniform(-lim, lim, 2), sphere_r + 0.05])
        d = rng.normal(size=(n_obj, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        coords.append(c + sphere_r * d)
        labels.append(np.full(n_obj, min(2, k - 1)))
    for _ in range(n_poles):
        c = rng.uniform(-lim, lim, 2)
        a = rng.uniform(0, 2 * np.pi, n_obj)
        z = rng.uniform(0, pole_h, n_obj)
        coords.append(np.column_stack([c[0] + pole_r * np.cos(a), c[1] + pole_r * np.sin(a), z]))
        labels.append(np.full(n_obj, min(3, k - 1)))
    per_label = {}
    for cls, comps, betti in ((0, 1, [1, 0, 0]), (1, 1, [1, 0, 0]),
                              (2, n_spheres, [1, 0, 1]), (3, n_poles, [1, 1, 0])):
        if comps and cls < k:
            per_label[cls] = [b * comps for b in betti]
    topo = {"per_label": per_label}
    return np.concatenate(coords), np.concatenate(labels), topo


_GENERATORS = {
    "clusters": _clusters,
    "circle": _circle,
    "torus-slice": _torus_slice,
    "planes+objects": _planes_objects,
}


def generate_scene(spec: SceneSpec) -> PointCloud:
    """Sample a labelled cloud for ``spec``; ground-truth Betti numbers go in ``topology``."""
    rng = np.random.default_rng(spec.seed)
    coords, labels, topo = _GENERATORS[spec.shape](spec, rng)
    intensity = rng.uniform(0.0, 1.0, coords.shape[0])
    topo = dict(topo, shape=spec.shape)
    return PointCloud(coords, intensity, labels, spec.n_classes, topo)


# ---------------------------------------------------------------------------
# preprocessing


def augment(cloud: PointCloud, cfg: AugmentConfig, seed=None) -> PointCloud:
    """Random z-rotation, uniform scaling, axis flips and clipped Gaussian jitter."""
    rng = np.random.default_rng(seed)
    xyz = cloud.coords.copy()
    if rng.uniform() < cfg.rotate_prob:
        a = math.radians(rng.uniform(-cfg.rotate_degrees, cfg.rotate_degrees))
        c, s = math.cos(a), math.sin(a)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        xyz = xyz @ rot.T
    lo, hi = cfg.scale_range
    if hi > lo:
        xyz *= rng.uniform(lo, hi)
    elif lo != 1.0:
        xyz *= lo
    for axis in (0, 1):
        if rng.uniform() < cfg.flip_prob:
            xyz[:, axis] = -xyz[:, axis]
    if cfg.jitter_sigma > 0:
        xyz += clipped_jitter(rng, xyz.shape, cfg.jitter_sigma, cfg.jitter_clip)
    return cloud.with_coords(xyz)


def clipped_jitter(rng, shape, sigma, clip):
    return np.clip(rng.normal(scale=sigma, size=shape), -clip, clip)


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & _MASK64
    return h


def fnv1a_64_rows(keys: np.ndarray) -> np.ndarray:
    """Vectorised FNV-1a/64 over each row of an int64 array, bytes little-endian."""
    keys = np.ascontiguousarray(keys, dtype="<i8")
    raw = keys.view(np.uint8).reshape(keys.shape[0], -1)
    h = np.full(keys.shape[0], FNV_OFFSET, dtype=np.uint64)
    prime = np.uint64(FNV_PRIME)
    with np.errstate(over="ignore"):
        for j in range(raw.shape[1]):
            h ^= raw[:, j].astype(np.uint64)
            h *= prime
    return h


def grid_sample(cloud: PointCloud, grid: float = 0.05) -> PointCloud:
    """Keep the lowest-index point of every occupied voxel of side ``grid``."""
    if not grid > 0:
        raise ValueError(f"grid size must be positive, got {grid}")
    cells = np.floor(cloud.coords / grid).astype(np.int64)
    keys = fnv1a_64_rows(cells)
    _, first = np.unique(keys, return_index=True)
    return cloud.take(np.sort(first))


# ---------------------------------------------------------------------------
# metric


def iou_per_class(pred, gt, n_classes) -> np.ndarray:
    """IoU for every class; NaN for classes absent from both ``pred`` and ``gt``."""
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: pred {pred.shape[0]} vs gt {gt.shape[0]}")
    for name, a in (("pred", pred), ("gt", gt)):
        if a.size and (a.min() < 0 or a.max() >= n_classes):
            raise ValueError(f"{name} contains class ids outside [0, {n_classes})")
    conf = np.bincount(gt * n_classes + pred, minlength=n_classes * n_classes)
    conf = conf.reshape(n_classes, n_classes)
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, np.nan)


def miou(pred, gt, n_classes) -> float:
    ious = iou_per_class(pred, gt, n_classes)
    present = ~np.isnan(ious)
    if not present.any():
        raise ValueError("miou needs at least one point")
    return float(ious[present].mean())


# ---------------------------------------------------------------------------
# file formats
#
# Text: optional "# fields: x y z [intensity] [label]" header, then one point
# per line. Without a header, 3 columns are coordinates and 5 columns are
# coordinates, intensity and label; 4 columns are ambiguous and rejected.
#
# Binary (little-endian): 16-byte header
#   magic b"TKPC" | u16 version (1) | u16 field mask (1 intensity, 2 labels) | u64 N
# followed by N*3 float64 coords, N float64 intensities (if set), N int32 labels (if set).

_MAGIC = b"TKPC"
_HEADER = struct.Struct("<4sHHQ")
_HAS_INTENSITY = 1
_HAS_LABELS = 2


def write_text(cloud: PointCloud, path):
    fields = ["x", "y", "z"]
    cols = [cloud.coords]
    fmt = ["%.17g"] * 3
    if cloud.intensity is not None:
        fields.append("intensity")
        cols.append(cloud.intensity[:, None])
        fmt.append("%.17g")
    if cloud.labels is not None:
        fields.append("label")
        cols.append(cloud.labels[:, None])
        fmt.append("%d")
    np.savetxt(path, np.hstack(cols), fmt=fmt, header="fields: " + " ".join(fields), comments="# ")


def read_text(path, n_classes=None) -> PointCloud:
    path = Path(path)
    fields = None
    with path.open() as fh:
        first = fh.readline()
    if first.startswith("#") and "fields:" in first:
        fields = first.split("fields:", 1)[1].split()
    data = np.loadtxt(path, comments="#", ndmin=2)
    if fields is None:
        fields = {3: ["x", "y", "z"], 5: ["x", "y", "z", "intensity", "label"]}.get(data.shape[1])
        if fields is None:
            raise ValueError(f"{path}: {data.shape[1]} columns without a fields header")
    if len(fields) != data.shape[1] or fields[:3] != ["x", "y", "z"]:
        raise ValueError(f"{path}: header {fields} does not match {data.shape[1]} columns")
    intensity = data[:, fields.index("intensity")] if "intensity" in fields else None
    labels = data[:, fields.index("label")].astype(np.int64) if "label" in fields else None
    return PointCloud(data[:, :3], intensity, labels, n_classes)


def write_binary(cloud: PointCloud, path):
    mask = (_HAS_INTENSITY if cloud.intensity is not None else 0) | (
        _HAS_LABELS if cloud.labels is not None else 0)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, 1, mask, len(cloud)))
        fh.write(cloud.coords.astype("<f8").tobytes())
        if cloud.intensity is not None:
            fh.write(cloud.intensity.astype("<f8").tobytes())
        if cloud.labels is not None:
            fh.write(cloud.labels.astype("<i4").tobytes())


def read_binary(path, n_classes=None) -> PointCloud:
    buf = Path(path).read_bytes()
    magic, version, mask, n = _HEADER.unpack_from(buf, 0)
    if magic != _MAGIC or version != 1:
        raise ValueError(f"{path}: not a version-1 point-cloud file")
    off = _HEADER.size
    coords = np.frombuffer(buf, "<f8", n * 3, off).reshape(n, 3)
    off += n * 24
    intensity = labels = None
    if mask & _HAS_INTENSITY:
        intensity = np.frombuffer(buf, "<f8", n, off)
        off += n * 8
    if mask & _HAS_LABELS:
        labels = np.frombuffer(buf, "<i4", n, off).astype(np.int64)
        off += n * 4
    if off != len(buf):
        raise ValueError(f"{path}: trailing or missing bytes")
    return PointCloud(coords.copy(), None if intensity is None else intensity.copy(), labels,
                      n_classes)
