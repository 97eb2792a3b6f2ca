"""Synthetic point-cloud datasets, normalization, augmentation, and batching.

Eight parametric surface classes stand in for a real scan benchmark at desk
scale.  Every generator centers its shape so the surface centroid sits at the
origin; class identity therefore lives in geometry, not in trivially
separable first moments.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .validation import ConfigurationError, check_coords

__all__ = [
    "SHAPE_NAMES",
    "PointCloud",
    "DatasetManifest",
    "generate_synthetic",
    "normalize_unit_sphere",
    "augment",
    "save_xyz",
    "load_xyz",
    "write_manifest",
    "read_manifest",
    "generate_dataset",
    "subsample_manifest",
    "load_manifest_arrays",
    "batch_iter",
]

SHAPE_NAMES = (
    "sphere",
    "cube",
    "cylinder",
    "torus",
    "cone",
    "pyramid",
    "plane",
    "helix",
)


@dataclass
class PointCloud:
    """Batch of point sets: coordinates plus optional features and labels."""

    coords: np.ndarray  # (B, N, 3)
    feats: np.ndarray | None = None  # (B, N, d)
    labels: np.ndarray | None = None  # (B,)

    def __post_init__(self):
        self.coords = check_coords(self.coords)

    @property
    def batch_size(self):
        return self.coords.shape[0]

    @property
    def n_points(self):
        return self.coords.shape[1]


# ---------------------------------------------------------------------------
# shape generators (surface centroid ~ 0 by construction)
# ---------------------------------------------------------------------------


def _sample_sphere(n, rng):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v


def _sample_cube(n, rng):
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        m = axis == a
        others = [i for i in range(3) if i != a]
        pts[m, a] = sign[m]
        pts[np.ix_(m, others)] = uv[m]
    return pts


def _sample_cylinder(n, rng):
    r, h = 0.6, 1.8
    lateral = 2.0 * np.pi * r * h
    cap = np.pi * r * r
    total = lateral + 2 * cap
    u = rng.uniform(0.0, total, size=n)
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    on_side = u < lateral
    pts[on_side, 0] = r * np.cos(theta[on_side])
    pts[on_side, 1] = r * np.sin(theta[on_side])
    pts[on_side, 2] = rng.uniform(-h / 2, h / 2, size=on_side.sum())
    on_cap = ~on_side
    rho = r * np.sqrt(rng.uniform(size=on_cap.sum()))
    pts[on_cap, 0] = rho * np.cos(theta[on_cap])
    pts[on_cap, 1] = rho * np.sin(theta[on_cap])
    pts[on_cap, 2] = np.where(u[on_cap] < lateral + cap, h / 2, -h / 2)
    return pts


def _sample_torus(n, rng):
    big, small = 0.75, 0.3
    pts = np.empty((n, 3))
    filled = 0
    while filled < n:
        m = 2 * (n - filled) + 8
        theta = rng.uniform(0.0, 2 * np.pi, size=m)
        phi = rng.uniform(0.0, 2 * np.pi, size=m)
        # surface density along the tube angle is proportional to big + small*cos(phi)
        keep = rng.uniform(size=m) < (big + small * np.cos(phi)) / (big + small)
        theta, phi = theta[keep], phi[keep]
        take = min(len(theta), n - filled)
        ring = big + small * np.cos(phi[:take])
        pts[filled : filled + take, 0] = ring * np.cos(theta[:take])
        pts[filled : filled + take, 1] = ring * np.sin(theta[:take])
        pts[filled : filled + take, 2] = small * np.sin(phi[:take])
        filled += take
    return pts


def _sample_cone(n, rng):
    r, h = 1.0, 1.5
    lateral = np.pi * r * np.sqrt(r * r + h * h)
    base = np.pi * r * r
    z0 = -(lateral * (h / 3.0)) / (lateral + base)  # put surface centroid at z=0
    apex_z = z0 + h
    u = rng.uniform(0.0, lateral + base, size=n)
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    side = u < lateral
    t = np.sqrt(rng.uniform(size=side.sum()))  # fraction of slant from apex
    pts[side, 0] = r * t * np.cos(theta[side])
    pts[side, 1] = r * t * np.sin(theta[side])
    pts[side, 2] = apex_z - h * t
    flat = ~side
    rho = r * np.sqrt(rng.uniform(size=flat.sum()))
    pts[flat, 0] = rho * np.cos(theta[flat])
    pts[flat, 1] = rho * np.sin(theta[flat])
    pts[flat, 2] = z0
    return pts


def _sample_pyramid(n, rng):
    a, h = 0.8, 1.5  # half base side, height
    slant = np.sqrt(h * h + a * a)
    tri_area = 0.5 * (2 * a) * slant
    base_area = (2 * a) ** 2
    total = 4 * tri_area + base_area
    z0 = -(4 * tri_area * (h / 3.0)) / total
    apex = np.array([0.0, 0.0, z0 + h])
    corners = np.array(
        [[a, a, z0], [-a, a, z0], [-a, -a, z0], [a, -a, z0]]
    )
    u = rng.uniform(0.0, total, size=n)
    pts = np.empty((n, 3))
    on_base = u >= 4 * tri_area
    nb = on_base.sum()
    pts[on_base, :2] = rng.uniform(-a, a, size=(nb, 2))
    pts[on_base, 2] = z0
    tri = np.minimum((u[~on_base] / tri_area).astype(int), 3)
    s = np.sqrt(rng.uniform(size=(~on_base).sum()))[:, None]
    v = rng.uniform(size=(~on_base).sum())[:, None]
    b = corners[tri]
    c = corners[(tri + 1) % 4]
    pts[~on_base] = (1 - s) * apex + s * ((1 - v) * b + v * c)
    return pts


def _sample_plane(n, rng):
    pts = np.zeros((n, 3))
    pts[:, :2] = rng.uniform(-1.0, 1.0, size=(n, 2))
    return pts


def _sample_helix(n, rng):
    radius, turns, height = 0.6, 3, 1.6  # whole turns keep the centroid at 0
    t = rng.uniform(size=n)
    ang = 2 * np.pi * turns * t
    return np.stack(
        [radius * np.cos(ang), radius * np.sin(ang), height * (t - 0.5)], axis=1
    )


_GENERATORS = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "cylinder": _sample_cylinder,
    "torus": _sample_torus,
    "cone": _sample_cone,
    "pyramid": _sample_pyramid,
    "plane": _sample_plane,
    "helix": _sample_helix,
}


def generate_synthetic(shape_class, n_points, seed):
    """Sample one synthetic cloud; deterministic in (class, n_points, seed)."""
    if shape_class not in _GENERATORS:
        raise ConfigurationError(
            f"unknown shape class {shape_class!r}; valid: {', '.join(SHAPE_NAMES)}"
        )
    if n_points < 32:
        raise ConfigurationError(f"n_points must be >= 32, got {n_points}")
    rng = np.random.default_rng(
        np.random.SeedSequence([SHAPE_NAMES.index(shape_class), n_points, int(seed)])
    )
    pts = _GENERATORS[shape_class](n_points, rng).astype(np.float32)
    return PointCloud(coords=pts[None])


# ---------------------------------------------------------------------------
# normalization and augmentation
# ---------------------------------------------------------------------------


def normalize_unit_sphere(pc):
    """Center each sample at its centroid and scale max norm to 1."""
    coords = pc.coords.astype(np.float32, copy=True)
    centroid = coords.mean(axis=1, keepdims=True)
    coords -= centroid
    radius = np.linalg.norm(coords, axis=2).max(axis=1)
    safe = np.maximum(radius, 1e-12)[:, None, None]
    coords = np.where(radius[:, None, None] > 1e-12, coords / safe, 0.0)
    return replace(pc, coords=coords.astype(np.float32))


def augment(pc, seed):
    """Per-sample anisotropic scale in [0.8, 1.25] and shift in [-0.1, 0.1]."""
    rng = np.random.default_rng(np.random.SeedSequence([0x5CA1E, int(seed)]))
    b = pc.batch_size
    scales = rng.uniform(0.8, 1.25, size=(b, 1, 3)).astype(np.float32)
    shifts = rng.uniform(-0.1, 0.1, size=(b, 1, 3)).astype(np.float32)
    return replace(pc, coords=pc.coords * scales + shifts)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


class FormatError(ValueError):
    """Malformed point-cloud or manifest file."""


def save_xyz(path, coords, label=None):
    """Write one sample: header ``N <count> [label <int>]`` then x y z rows."""
    coords = np.asarray(coords, dtype=np.float32)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ValueError(f"save_xyz expects (N, 3) coordinates, got {coords.shape}")
    lines = [f"N {coords.shape[0]}" + (f" label {int(label)}" if label is not None else "")]
    for row in coords:
        lines.append(f"{float(row[0])!r} {float(row[1])!r} {float(row[2])!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_xyz(path):
    """Parse one sample file; returns a single-sample PointCloud."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("N "):
        raise FormatError(f"{path}:1: expected header 'N <count> [label <int>]'")
    header = lines[0].split()
    try:
        count = int(header[1])
    except (IndexError, ValueError) as exc:
        raise FormatError(f"{path}:1: bad point count in header") from exc
    label = None
    if len(header) >= 4 and header[2] == "label":
        label = int(header[3])
    rows = [ln for ln in lines[1:] if ln.strip()]
    if len(rows) != count:
        raise FormatError(
            f"{path}: header declares {count} points but file has {len(rows)} rows"
        )
    coords = np.empty((count, 3), dtype=np.float32)
    for i, ln in enumerate(rows):
        parts = ln.split()
        if len(parts) != 3:
            raise FormatError(f"{path}:{i + 2}: expected 3 coordinates, got {ln!r}")
        try:
            coords[i] = [float(p) for p in parts]
        except ValueError as exc:
            raise FormatError(f"{path}:{i + 2}: non-numeric coordinate in {ln!r}") from exc
    labels = None if label is None else np.array([label], dtype=np.int64)
    return PointCloud(coords=coords[None], labels=labels)


@dataclass
class DatasetManifest:
    """Split listing: per-sample file paths, labels, class names, seed."""

    split: str
    class_names: tuple[str, ...]
    entries: list[tuple[str, int]] = field(default_factory=list)  # (path, label)
    seed: int = 0

    @property
    def n_samples(self):
        return len(self.entries)

    def labels(self):
        return np.array([lab for _, lab in self.entries], dtype=np.int64)

    def validate(self):
        labels = sorted({lab for _, lab in self.entries})
        if labels and labels != list(range(len(self.class_names))):
            missing = [p for p in range(len(self.class_names)) if p not in labels]
            raise FormatError(f"class indices not contiguous from 0; missing {missing}")
        for path, _ in self.entries:
            if not os.path.exists(path):
                raise FormatError(f"manifest entry does not exist: {path}")
        return self


def write_manifest(path, manifest):
    lines = [
        f"# classes = {','.join(manifest.class_names)}",
        f"# seed = {manifest.seed}",
    ]
    for p, lab in manifest.entries:
        lines.append(f"{p},{lab},{manifest.split}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path):
    class_names, seed, entries, split = (), 0, [], None
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, ln in enumerate(fh, start=1):
            ln = ln.strip()
            if not ln:
                continue
            if ln.startswith("#"):
                key, _, val = ln[1:].partition("=")
                key = key.strip()
                if key == "classes":
                    class_names = tuple(v.strip() for v in val.split(","))
                elif key == "seed":
                    seed = int(val)
                continue
            parts = ln.split(",")
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 'path,label,split'")
            p = parts[0] if os.path.isabs(parts[0]) else os.path.join(base, parts[0])
            entries.append((p, int(parts[1])))
            split = parts[2]
    if split is None:
        raise ConfigurationError(f"manifest {path} lists no samples")
    return DatasetManifest(
        split=split, class_names=class_names, entries=entries, seed=seed
    ).validate()


def generate_dataset(
    out_dir,
    n_points=128,
    train_per_class=100,
    test_per_class=30,
    seed=0,
    classes=SHAPE_NAMES,
):
    """Write the synthetic benchmark to disk; idempotent per seed.

    Returns (train_manifest_path, test_manifest_path).
    """
    paths = {}
    for split, per_class in (("train", train_per_class), ("test", test_per_class)):
        split_dir = os.path.join(out_dir, split)
        os.makedirs(split_dir, exist_ok=True)
        entries = []
        for label, name in enumerate(classes):
            for i in range(per_class):
                # unique per (seed, split, class, i) so splits never overlap
                sample_seed = (seed * 1_000_003 + (0 if split == "train" else 500_000)
                               + label * 10_000 + i)
                pc = normalize_unit_sphere(generate_synthetic(name, n_points, sample_seed))
                fname = f"{name}_{i:04d}.xyz"
                fpath = os.path.join(split_dir, fname)
                save_xyz(fpath, pc.coords[0], label=label)
                entries.append((os.path.join(split, fname), label))
        man = DatasetManifest(split=split, class_names=tuple(classes),
                              entries=entries, seed=seed)
        mpath = os.path.join(out_dir, f"{split}_manifest.txt")
        write_manifest(mpath, man)
        paths[split] = mpath
    return paths["train"], paths["test"]


def subsample_manifest(manifest, percent, seed=0):
    """Per-class subsample for the limited-data protocol ({1,2,5,10,20}%)."""
    if not 0 < percent <= 100:
        raise ConfigurationError(f"percent must be in (0, 100], got {percent}")
    rng = np.random.default_rng(np.random.SeedSequence([0x11B5, int(seed)]))
    by_class = {}
    for path, lab in manifest.entries:
        by_class.setdefault(lab, []).append((path, lab))
    keep = []
    for lab in sorted(by_class):
        group = by_class[lab]
        n = max(1, int(round(len(group) * percent / 100.0)))
        chosen = rng.choice(len(group), size=n, replace=False)
        keep.extend(group[i] for i in sorted(chosen))
    return replace(manifest, entries=keep)


def load_manifest_arrays(manifest):
    """Load every sample into memory: (coords (S, N, 3), labels (S,))."""
    coords, labels = [], []
    for path, lab in manifest.entries:
        pc = load_xyz(path)
        coords.append(pc.coords[0])
        labels.append(lab)
    arr = np.stack(coords).astype(np.float32)
    return arr, np.asarray(labels, dtype=np.int64)


def batch_iter(coords, labels, batch_size, shuffle_seed=None):
    """Yield PointCloud batches covering every sample exactly once.

    The final short batch is emitted.  Order is a pure function of
    shuffle_seed; None keeps manifest order.
    """
    n = coords.shape[0]
    if n == 0:
        raise ConfigurationError("cannot iterate an empty dataset")
    if batch_size > n:
        raise ConfigurationError(f"batch_size {batch_size} exceeds sample count {n}")
    order = np.arange(n)
    if shuffle_seed is not None:
        rng = np.random.default_rng(np.random.SeedSequence([0xBA7C4, int(shuffle_seed)]))
        rng.shuffle(order)
    for start in range(0, n, batch_size):
        sel = order[start : start + batch_size]
        yield PointCloud(coords=coords[sel], labels=labels[sel] if labels is not None else None)
