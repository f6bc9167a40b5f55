"""Synthetic two-domain point-cloud benchmark and its on-disk formats.

Source clouds are clean, uniformly sampled primitive surfaces. Target clouds
are the same primitive classes seen as a sensor would: cropped to the half
facing a random viewpoint, resampled with a density bias toward that
viewpoint, and perturbed with Gaussian noise. Both domains are normalized to
the unit ball and split 80/20 per class into train/test.

Cloud file (``.pcl``)::

    b"PCL1" | u32 LE point count m | 3*m float32 LE (x, y, z interleaved)

Manifest (``manifest.json``, one per domain directory)::

    {"version": 1, "domain": "source"|"target", "seed": int,
     "classes": [names], "params": {...generation parameters...},
     "samples": [{"path": "train/cone_0003.pcl", "label": int|null,
                  "domain": ..., "split": "train"|"test",
                  "diagnostic_label": int (target train only)}]}

Target-train records carry ``label: null``; their class is kept under
``diagnostic_label`` for pseudo-label diagnostics only.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geom

PRIMITIVES = ("sphere", "box", "cylinder", "cone", "torus", "capsule", "pyramid", "ellipsoid")
MANIFEST_VERSION = 1
CLOUD_MAGIC = b"PCL1"
DOMAINS = ("source", "target")
TRAIN_FRACTION = 0.8

DEFAULT_GAP = {
    "noise_sigma": 0.02,
    "crop_threshold": (-0.45, 0.05),  # dot(point, view) cut-off, unit-ball units
    "density_bias": (1.0, 3.0),  # exp(kappa * dot(point, view)) resampling weight
    "elevation_deg": (-20.0, 60.0),
    "oversample": 4,
}


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


# ---------------------------------------------------------------- cloud files


def write_cloud(path, cloud) -> None:
    pts = np.ascontiguousarray(cloud, dtype="<f4")
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (m, 3) cloud, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("cannot write non-finite coordinates")
    with open(path, "wb") as f:
        f.write(CLOUD_MAGIC + struct.pack("<I", len(pts)) + pts.tobytes())


def parse_cloud(raw: bytes) -> np.ndarray:
    if raw[:4] != CLOUD_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {CLOUD_MAGIC!r}", 0)
    if len(raw) < 8:
        raise FormatError("truncated point count", 4)
    (m,) = struct.unpack_from("<I", raw, 4)
    need = 8 + 12 * m
    if len(raw) < need:
        have = (len(raw) - 8) // 12
        raise FormatError(f"declared {m} points but payload holds {have}", len(raw))
    if len(raw) > need:
        raise FormatError(f"{len(raw) - need} trailing bytes after {m} points", need)
    return np.frombuffer(raw, dtype="<f4", count=3 * m, offset=8).reshape(m, 3).astype(np.float32)


def read_cloud(path) -> np.ndarray:
    with open(path, "rb") as f:
        return parse_cloud(f.read())


def downsample(cloud, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random subset of ``n`` points without replacement, original order kept."""
    pts = np.asarray(cloud)
    if not 1 <= n <= len(pts):
        raise ValueError(f"cannot downsample {len(pts)} points to {n}")
    keep = np.sort(rng.choice(len(pts), size=n, replace=False))
    return pts[keep]


# ---------------------------------------------------------------- primitives


def _pick_by_area(rng, areas, n):
    areas = np.asarray(areas, dtype=np.float64)
    return rng.choice(len(areas), size=n, p=areas / areas.sum())


def _unit_sphere(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _disk(rng, n, r):
    rad = r * np.sqrt(rng.random(n))
    t = rng.uniform(0, 2 * np.pi, n)
    return rad * np.cos(t), rad * np.sin(t)


def _triangles(rng, tris, n):
    tris = np.asarray(tris, dtype=np.float64)  # (T, 3, 3)
    areas = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
    which = _pick_by_area(rng, areas, n)
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    t = tris[which]
    return t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])


def sample_sphere(rng, n):
    return _unit_sphere(rng, n)


def sample_ellipsoid(rng, n):
    axes = np.array([1.0, rng.uniform(0.45, 0.7), rng.uniform(0.25, 0.45)])
    rng.shuffle(axes)
    out = np.empty((0, 3))
    # rejection on the surface-area element of the sphere-to-ellipsoid map
    while len(out) < n:
        u = _unit_sphere(rng, 2 * n)
        a, b, c = axes
        dens = np.sqrt((b * c * u[:, 0]) ** 2 + (a * c * u[:, 1]) ** 2 + (a * b * u[:, 2]) ** 2)
        keep = rng.random(2 * n) * max(a * b, a * c, b * c) < dens
        out = np.concatenate([out, u[keep] * axes])
    return out[:n]


def sample_box(rng, n):
    s = rng.uniform(0.5, 1.5, 3) / 2
    areas = [s[1] * s[2]] * 2 + [s[0] * s[2]] * 2 + [s[0] * s[1]] * 2
    face = _pick_by_area(rng, areas, n)
    pts = rng.uniform(-1, 1, (n, 3)) * s
    axis, sign = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * s[axis]
    return pts


def sample_cylinder(rng, n):
    r, h = rng.uniform(0.3, 0.6), rng.uniform(1.0, 2.0)
    part = _pick_by_area(rng, [2 * np.pi * r * h, np.pi * r * r, np.pi * r * r], n)
    t = rng.uniform(0, 2 * np.pi, n)
    pts = np.stack([r * np.cos(t), r * np.sin(t), rng.uniform(-h / 2, h / 2, n)], axis=1)
    for cap, z in ((1, h / 2), (2, -h / 2)):
        sel = part == cap
        pts[sel, 0], pts[sel, 1] = _disk(rng, sel.sum(), r)
        pts[sel, 2] = z
    return pts


def sample_cone(rng, n):
    r, h = rng.uniform(0.4, 0.8), rng.uniform(0.8, 1.6)
    slant = np.hypot(r, h)
    part = _pick_by_area(rng, [np.pi * r * slant, np.pi * r * r], n)
    # lateral surface: radius from apex grows linearly, so sample sqrt-uniform
    s = np.sqrt(rng.random(n))
    t = rng.uniform(0, 2 * np.pi, n)
    pts = np.stack([s * r * np.cos(t), s * r * np.sin(t), h - s * h], axis=1)
    base = part == 1
    pts[base, 0], pts[base, 1] = _disk(rng, base.sum(), r)
    pts[base, 2] = 0.0
    return pts


def sample_torus(rng, n):
    R, r = rng.uniform(0.6, 0.8), rng.uniform(0.15, 0.3)
    out = np.empty((0, 3))
    while len(out) < n:
        u, v = rng.uniform(0, 2 * np.pi, (2, 2 * n))
        keep = rng.random(2 * n) * (R + r) < R + r * np.cos(v)
        u, v = u[keep], v[keep]
        ring = R + r * np.cos(v)
        out = np.concatenate([out, np.stack([ring * np.cos(u), ring * np.sin(u), r * np.sin(v)], axis=1)])
    return out[:n]


def sample_capsule(rng, n):
    r, h = rng.uniform(0.25, 0.45), rng.uniform(0.6, 1.4)
    part = _pick_by_area(rng, [2 * np.pi * r * h, 4 * np.pi * r * r], n)
    t = rng.uniform(0, 2 * np.pi, n)
    pts = np.stack([r * np.cos(t), r * np.sin(t), rng.uniform(-h / 2, h / 2, n)], axis=1)
    caps = part == 1
    s = _unit_sphere(rng, caps.sum()) * r
    s[:, 2] += np.where(s[:, 2] >= 0, h / 2, -h / 2)
    pts[caps] = s
    return pts


def sample_pyramid(rng, n):
    a, h = rng.uniform(0.8, 1.4) / 2, rng.uniform(0.6, 1.4)
    c = np.array([[a, a, 0], [-a, a, 0], [-a, -a, 0], [a, -a, 0]])
    apex = np.array([0, 0, h])
    tris = [[c[i], c[(i + 1) % 4], apex] for i in range(4)] + [[c[0], c[1], c[2]], [c[0], c[2], c[3]]]
    return _triangles(rng, tris, n)


SAMPLERS = {
    "sphere": sample_sphere,
    "box": sample_box,
    "cylinder": sample_cylinder,
    "cone": sample_cone,
    "torus": sample_torus,
    "capsule": sample_capsule,
    "pyramid": sample_pyramid,
    "ellipsoid": sample_ellipsoid,
}


def make_source_cloud(shape: str, n: int, rng: np.random.Generator) -> np.ndarray:
    pts = SAMPLERS[shape](rng, n)
    pts = geom.rotate_z(pts, rng.uniform(0, 2 * np.pi))
    return geom.normalize_unit_ball(pts)


def make_target_cloud(shape: str, n: int, rng: np.random.Generator, gap: dict = DEFAULT_GAP) -> np.ndarray:
    """Partial, noisy, view-biased scan of a primitive."""
    dense = make_source_cloud(shape, gap["oversample"] * n, rng)
    az = rng.uniform(0, 2 * np.pi)
    el = np.deg2rad(rng.uniform(*gap["elevation_deg"]))
    view = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    facing = dense @ view
    cut = rng.uniform(*gap["crop_threshold"])
    visible = np.flatnonzero(facing >= cut)
    if len(visible) < n // 4:
        # keep at least a quarter of the surface so tiny crops stay classifiable
        visible = np.argsort(-facing, kind="stable")[: n // 4]
    kappa = rng.uniform(*gap["density_bias"])
    w = np.exp(kappa * (facing[visible] - facing[visible].max()))
    pick = rng.choice(visible, size=n, replace=True, p=w / w.sum())
    pts = dense[pick] + gap["noise_sigma"] * rng.standard_normal((n, 3))
    return geom.normalize_unit_ball(pts)


# ---------------------------------------------------------------- benchmark


@dataclass
class DomainSample:
    cloud: np.ndarray
    label: int | None
    domain: str
    split: str


def _sample_rng(seed: int, domain: str, cls: int, i: int) -> np.random.Generator:
    return np.random.default_rng([seed, DOMAINS.index(domain), cls, i])


def generate_domain(
    domain: str, classes: int, per_class: int, points: int, seed: int, gap: dict = DEFAULT_GAP
) -> list[DomainSample]:
    """All samples of one domain, in class-major order, with a stratified 80/20 split."""
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}")
    if not 2 <= classes <= len(PRIMITIVES):
        raise ValueError(f"classes must be in [2, {len(PRIMITIVES)}], got {classes}")
    if per_class < 20:
        raise ValueError("per_class must be at least 20")
    if not 16 < points <= 2048:
        raise ValueError("points must be in (16, 2048]")
    n_train = int(round(TRAIN_FRACTION * per_class))
    out = []
    for c, shape in enumerate(PRIMITIVES[:classes]):
        for i in range(per_class):
            rng = _sample_rng(seed, domain, c, i)
            if domain == "source":
                cloud = make_source_cloud(shape, points, rng)
            else:
                cloud = make_target_cloud(shape, points, rng, gap)
            out.append(DomainSample(cloud, c, domain, "train" if i < n_train else "test"))
    return out


def generate_benchmark(
    out_dir, classes: int = 6, per_class: int = 100, points: int = 256, seed: int = 0
) -> tuple[dict, dict]:
    """Write ``out_dir/source`` and ``out_dir/target`` and return their manifests."""
    out_dir = Path(out_dir)
    params = {"classes": classes, "per_class": per_class, "points": points, "gap": DEFAULT_GAP}
    manifests = []
    for domain in DOMAINS:
        root = out_dir / domain
        for split in ("train", "test"):
            (root / split).mkdir(parents=True, exist_ok=True)
        records = []
        counters: dict = {}
        for s in generate_domain(domain, classes, per_class, points, seed):
            name = PRIMITIVES[s.label]
            k = counters[name] = counters.get(name, -1) + 1
            rel = f"{s.split}/{name}_{k:04d}.pcl"
            write_cloud(root / rel, s.cloud)
            rec = {"path": rel, "label": s.label, "domain": domain, "split": s.split}
            if domain == "target" and s.split == "train":
                rec["label"] = None
                rec["diagnostic_label"] = s.label
            records.append(rec)
        manifest = {
            "version": MANIFEST_VERSION,
            "domain": domain,
            "seed": seed,
            "classes": list(PRIMITIVES[:classes]),
            "params": params,
            "samples": records,
        }
        (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
        manifests.append(manifest)
    return manifests[0], manifests[1]


def load_manifest(domain_dir) -> dict:
    domain_dir = Path(domain_dir)
    path = domain_dir / "manifest.json" if domain_dir.is_dir() else domain_dir
    manifest = json.loads(Path(path).read_text())
    for key in ("version", "seed", "classes", "samples"):
        if key not in manifest:
            raise ValueError(f"manifest {path} lacks {key!r}")
    if manifest["version"] != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest['version']}")
    n = len(manifest["classes"])
    for rec in manifest["samples"]:
        for key in ("label", "diagnostic_label"):
            if rec.get(key) is not None and not 0 <= rec[key] < n:
                raise ValueError(f"{rec['path']}: class index {rec[key]} out of range")
    return manifest


@dataclass
class Split:
    """Clouds of one domain split, re-normalized in float64 after loading."""

    clouds: np.ndarray  # (N, m, 3)
    labels: np.ndarray  # (N,) int, -1 where hidden
    classes: list

    def __len__(self) -> int:
        return len(self.clouds)


def load_split(domain_dir, split: str, *, diagnostic: bool = False) -> Split:
    """Load one split. Hidden target-train labels are only returned with ``diagnostic=True``."""
    domain_dir = Path(domain_dir)
    manifest = load_manifest(domain_dir)
    root = domain_dir if domain_dir.is_dir() else domain_dir.parent
    clouds, labels = [], []
    for rec in manifest["samples"]:
        if rec["split"] != split:
            continue
        clouds.append(geom.normalize_unit_ball(read_cloud(root / rec["path"])))
        label = rec["label"]
        if label is None and diagnostic:
            label = rec.get("diagnostic_label")
        labels.append(-1 if label is None else label)
    if not clouds:
        raise ValueError(f"{domain_dir} has no {split!r} samples")
    return Split(np.stack(clouds), np.asarray(labels, dtype=np.int64), manifest["classes"])
