"""Synthetic shapes, partial views, data-regime splits, and file formats.

Formats:
  * ASCII PLY (x/y/z float properties, category and pair id in a comment)
  * PCB1 packed binary (many clouds per file, little-endian, float32)
  * RPDC checkpoints (named parameter arrays + epoch + config digest)
  * manifest: one ``id,category,role,pair_id`` line per item
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .degradation import resample_indices
from .geometry import PointCloud, normalize
from .nets import ModelParams

PRIMITIVES = ("sphere", "cuboid", "cylinder", "cone", "composite")
ROLES = (
    "paired_complete",
    "paired_incomplete",
    "unpaired_complete",
    "unpaired_incomplete",
    "test_complete",
    "test_incomplete",
)

PCB_MAGIC = b"PCB1"
CKPT_MAGIC = b"RPDC"
_NONE_U32 = 0xFFFFFFFF


# ---------------------------------------------------------------------------
# synthetic shapes


@dataclass
class ShapeSpec:
    primitive: str
    seed: int
    n_points: int = 2048
    id: Optional[str] = None

    def __post_init__(self):
        if self.primitive not in PRIMITIVES:
            raise ValueError(f"unknown primitive {self.primitive!r}")
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")

    @property
    def category(self) -> int:
        return PRIMITIVES.index(self.primitive)


def _sample_sphere(rng, n, radius):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * radius


def _sample_cuboid(rng, n, half):
    ax, ay, az = half
    areas = np.array([ay * az, ax * az, ax * ay], dtype=np.float64)
    faces = rng.choice(3, size=n, p=areas / areas.sum())
    signs = rng.choice([-1.0, 1.0], size=n)
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    pts[np.arange(n), faces] = signs * np.asarray(half)[faces]
    return pts


def _sample_cylinder(rng, n, radius, height):
    side_area = 2.0 * np.pi * radius * height
    cap_area = np.pi * radius**2
    p_side = side_area / (side_area + 2.0 * cap_area)
    on_side = rng.random(n) < p_side
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    z = rng.uniform(-height / 2.0, height / 2.0, size=n)
    r = radius * np.sqrt(rng.random(n))
    pts = np.empty((n, 3))
    pts[:, 0] = np.where(on_side, radius, r) * np.cos(theta)
    pts[:, 1] = np.where(on_side, radius, r) * np.sin(theta)
    cap_sign = rng.choice([-1.0, 1.0], size=n)
    pts[:, 2] = np.where(on_side, z, cap_sign * height / 2.0)
    return pts


def _sample_cone(rng, n, radius, height):
    slant = np.sqrt(radius**2 + height**2)
    side_area = np.pi * radius * slant
    base_area = np.pi * radius**2
    on_side = rng.random(n) < side_area / (side_area + base_area)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    frac = np.sqrt(rng.random(n))  # uniform over the lateral surface
    r_base = radius * np.sqrt(rng.random(n))
    pts = np.empty((n, 3))
    r = np.where(on_side, radius * frac, r_base)
    pts[:, 0] = r * np.cos(theta)
    pts[:, 1] = r * np.sin(theta)
    pts[:, 2] = np.where(on_side, height * (1.0 - frac), 0.0) - height / 4.0
    return pts


def _rotation_matrix(rng) -> np.ndarray:
    # QR of a Gaussian matrix, sign-fixed: uniform random rotation
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _sample_primitive(rng, primitive, n):
    if primitive == "sphere":
        return _sample_sphere(rng, n, rng.uniform(0.6, 1.0))
    if primitive == "cuboid":
        return _sample_cuboid(rng, n, rng.uniform(0.3, 1.0, size=3))
    if primitive == "cylinder":
        return _sample_cylinder(rng, n, rng.uniform(0.3, 0.8), rng.uniform(0.6, 1.6))
    if primitive == "cone":
        return _sample_cone(rng, n, rng.uniform(0.4, 0.9), rng.uniform(0.7, 1.5))
    # composite: two simple primitives, offset along a random axis
    parts = rng.choice(4, size=2, replace=False)
    offset = rng.uniform(0.4, 0.8) * _unit_direction(rng)
    half = n // 2
    a = _sample_primitive(rng, PRIMITIVES[parts[0]], half) * 0.6 - offset
    b = _sample_primitive(rng, PRIMITIVES[parts[1]], n - half) * 0.6 + offset
    return np.concatenate([a, b], axis=0)


def _unit_direction(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def gen_complete(spec: ShapeSpec, rotate: bool = True) -> PointCloud:
    """Sample the primitive's surface, normalize, resample to n_points.

    Primitives are constructed centered at the origin, so normalization is a
    pure rescale (max point norm 1); this keeps exact surface geometry
    (sphere norms, cuboid face planes) intact."""
    rng = np.random.default_rng(spec.seed)
    pts = _sample_primitive(rng, spec.primitive, spec.n_points)
    if rotate:
        pts = pts @ _rotation_matrix(rng).T
    pts = pts / np.max(np.linalg.norm(pts, axis=1))
    res = resample_indices(len(pts), spec.n_points, rng)
    return PointCloud(pts[res], category=spec.category, id=spec.id)


class PartialViewError(RuntimeError):
    pass


def make_partial(
    complete: PointCloud,
    view_seed: int,
    min_survivors: int = 32,
    max_retries: int = 16,
    patch_radius: float = 0.15,
) -> PointCloud:
    """Half-space cut plus one removed ball patch, resampled to full size.

    Approximates single-viewpoint occlusion. Retries with fresh geometry when
    fewer than `min_survivors` points survive.
    """
    rng = np.random.default_rng(view_seed)
    n = len(complete)
    for _ in range(max_retries):
        d = _unit_direction(rng)
        c = rng.uniform(-0.2, 0.4)
        keep = complete.points @ d <= c
        survivors = complete.points[keep]
        if len(survivors) == 0:
            continue
        center = survivors[rng.integers(len(survivors))]
        keep2 = np.linalg.norm(survivors - center, axis=1) >= patch_radius
        survivors = survivors[keep2]
        if len(survivors) >= min_survivors:
            res = resample_indices(len(survivors), n, rng)
            return complete.with_points(survivors[res])
    raise PartialViewError(
        f"could not produce a partial view with >= {min_survivors} points"
    )


# ---------------------------------------------------------------------------
# splits


@dataclass
class ManifestItem:
    id: str
    category: int
    role: str
    pair_id: Optional[int] = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")


@dataclass
class SplitManifest:
    items: List[ManifestItem]
    paired_fraction: float

    def __post_init__(self):
        if not (0.0 < self.paired_fraction <= 1.0):
            raise ValueError("paired_fraction must lie in (0, 1]")
        self.validate()

    def validate(self):
        ids = [it.id for it in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate item ids in manifest")
        for role_pair in (("paired_incomplete", "paired_complete"),
                          ("test_incomplete", "test_complete")):
            incomplete = [it for it in self.items if it.role == role_pair[0]]
            complete_by_pair = {
                it.pair_id: it for it in self.items if it.role == role_pair[1]
            }
            for it in incomplete:
                if it.pair_id is None or it.pair_id not in complete_by_pair:
                    raise ValueError(f"{it.id}: no {role_pair[1]} partner")

    def by_role(self, role: str) -> List[ManifestItem]:
        return [it for it in self.items if it.role == role]

    def pairs(self, kind: str = "paired") -> List[Tuple[ManifestItem, ManifestItem]]:
        """(incomplete, complete) item pairs for kind 'paired' or 'test'."""
        complete = {it.pair_id: it for it in self.by_role(f"{kind}_complete")}
        return [
            (it, complete[it.pair_id]) for it in self.by_role(f"{kind}_incomplete")
        ]


def build_splits(
    num_pairs: int,
    paired_fraction: float,
    extra_unpaired_complete: int = 0,
    extra_unpaired_incomplete: int = 0,
    seed: int = 0,
    num_test: int = 20,
    num_categories: int = 4,
) -> SplitManifest:
    """Deterministic role assignment implementing the scarce-pairs regime.

    Of `num_pairs` underlying training shapes, round(fraction * num_pairs)
    become supervised pairs; the rest are split between the unpaired-complete
    and unpaired-incomplete pools (distinct shapes, never both sides of one
    shape). Test shapes are disjoint from all training shapes.
    """
    if num_pairs < 1:
        raise ValueError("num_pairs must be >= 1")
    if not (0.0 < paired_fraction <= 1.0):
        raise ValueError("paired_fraction must lie in (0, 1]")
    if not (1 <= num_categories <= len(PRIMITIVES)):
        raise ValueError(f"num_categories must be in [1, {len(PRIMITIVES)}]")
    rng = np.random.default_rng(seed)
    n_paired = int(round(paired_fraction * num_pairs))
    if n_paired < 1:
        warnings.warn("paired fraction yields 0 pairs; clamped to 1")
        n_paired = 1

    n_rest = num_pairs - n_paired
    n_uc = n_rest // 2 + extra_unpaired_complete
    n_ui = (n_rest - n_rest // 2) + extra_unpaired_incomplete
    total_shapes = n_paired + n_uc + n_ui + num_test

    categories = np.arange(total_shapes) % num_categories
    rng.shuffle(categories)

    items: List[ManifestItem] = []
    shape = 0

    def next_shape():
        nonlocal shape
        sid, cat = shape, int(categories[shape])
        shape += 1
        return sid, cat

    for _ in range(n_paired):
        sid, cat = next_shape()
        items.append(ManifestItem(f"s{sid:05d}_c", cat, "paired_complete", sid))
        items.append(ManifestItem(f"s{sid:05d}_p", cat, "paired_incomplete", sid))
    for _ in range(n_uc):
        sid, cat = next_shape()
        items.append(ManifestItem(f"s{sid:05d}_c", cat, "unpaired_complete"))
    for _ in range(n_ui):
        sid, cat = next_shape()
        items.append(ManifestItem(f"s{sid:05d}_p", cat, "unpaired_incomplete"))
    for _ in range(num_test):
        sid, cat = next_shape()
        items.append(ManifestItem(f"s{sid:05d}_c", cat, "test_complete", sid))
        items.append(ManifestItem(f"s{sid:05d}_p", cat, "test_incomplete", sid))
    return SplitManifest(items, paired_fraction)


def write_manifest(path, manifest: SplitManifest):
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# paired_fraction={manifest.paired_fraction!r}\n")
        for it in manifest.items:
            pid = "" if it.pair_id is None else str(it.pair_id)
            f.write(f"{it.id},{it.category},{it.role},{pid}\n")


def read_manifest(path) -> SplitManifest:
    items: List[ManifestItem] = []
    fraction = 1.0
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "paired_fraction=" in line:
                    fraction = float(line.split("=", 1)[1])
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            item_id, cat, role, pid = parts
            items.append(
                ManifestItem(item_id, int(cat), role, int(pid) if pid else None)
            )
    return SplitManifest(items, fraction)


# ---------------------------------------------------------------------------
# PLY


class PlyFormatError(ValueError):
    pass


def write_ply(path, cloud: PointCloud):
    pts = cloud.points.astype(np.float32)
    cat = -1 if cloud.category is None else cloud.category
    pid = -1 if cloud.pair_id is None else cloud.pair_id
    with open(path, "w", encoding="utf-8") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"comment category {cat} pair {pid}\n")
        f.write(f"element vertex {len(pts)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("end_header\n")
        for x, y, z in pts:
            f.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def read_ply(path) -> PointCloud:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PlyFormatError(f"{path}:1: not a PLY file")
    n_vertices = None
    category = None
    pair_id = None
    properties: List[str] = []
    header_end = None
    for i, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise PlyFormatError(f"{path}:{i}: only ascii PLY is supported")
        elif tok[0] == "comment":
            if len(tok) >= 5 and tok[1] == "category" and tok[3] == "pair":
                category = int(tok[2])
                pair_id = int(tok[4])
        elif tok[0] == "element":
            if tok[1] == "vertex":
                n_vertices = int(tok[2])
            elif n_vertices is None:
                raise PlyFormatError(f"{path}:{i}: first element must be vertex")
        elif tok[0] == "property":
            properties.append(tok[-1])
        elif tok[0] == "end_header":
            header_end = i
            break
    if header_end is None:
        raise PlyFormatError(f"{path}: missing end_header")
    if properties[:3] != ["x", "y", "z"] or len(properties) != 3:
        raise PlyFormatError(f"{path}: expected exactly properties x, y, z, got {properties}")
    if n_vertices is None:
        raise PlyFormatError(f"{path}: missing vertex element")
    pts = np.empty((n_vertices, 3), dtype=np.float64)
    for j in range(n_vertices):
        lineno = header_end + 1 + j
        if lineno > len(lines):
            raise PlyFormatError(f"{path}:{lineno}: unexpected end of file")
        tok = lines[lineno - 1].split()
        if len(tok) != 3:
            raise PlyFormatError(f"{path}:{lineno}: expected 3 coordinates")
        try:
            pts[j] = [float(v) for v in tok]
        except ValueError as e:
            raise PlyFormatError(f"{path}:{lineno}: non-numeric vertex") from e
    return PointCloud(
        pts,
        category=None if category in (None, -1) else category,
        pair_id=None if pair_id in (None, -1) else pair_id,
    )


# ---------------------------------------------------------------------------
# PCB1 packed binary


class PcbFormatError(ValueError):
    pass


def write_pcb(path, clouds: Sequence[PointCloud]):
    with open(path, "wb") as f:
        f.write(PCB_MAGIC)
        f.write(struct.pack("<I", len(clouds)))
        for c in clouds:
            cat = _NONE_U32 if c.category is None else c.category
            pid = _NONE_U32 if c.pair_id is None else c.pair_id
            f.write(struct.pack("<III", cat, pid, len(c)))
            f.write(c.points.astype("<f4").tobytes())


def _read_exact(f, n, what, exc=PcbFormatError):
    data = f.read(n)
    if len(data) != n:
        raise exc(f"truncated {what} at byte offset {f.tell() - len(data)}")
    return data


def read_pcb(path) -> List[PointCloud]:
    clouds: List[PointCloud] = []
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != PCB_MAGIC:
            raise PcbFormatError(f"bad magic {magic!r} at byte offset 0")
        (count,) = struct.unpack("<I", _read_exact(f, 4, "cloud count"))
        for _ in range(count):
            cat, pid, n = struct.unpack("<III", _read_exact(f, 12, "cloud header"))
            raw = _read_exact(f, n * 12, "vertex data")
            pts = np.frombuffer(raw, dtype="<f4").reshape(n, 3).astype(np.float64)
            clouds.append(
                PointCloud(
                    pts,
                    category=None if cat == _NONE_U32 else int(cat),
                    pair_id=None if pid == _NONE_U32 else int(pid),
                )
            )
    return clouds


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointFormatError(ValueError):
    pass


def config_digest(config) -> bytes:
    """sha256 over a canonical JSON rendering of any jsonable config."""
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).digest()


def save_checkpoint(
    path,
    params: Mapping[str, ModelParams],
    epoch: int,
    digest: bytes,
    extra: Optional[Mapping[str, np.ndarray]] = None,
):
    """Named-array container. ModelParams entries are stored under
    '<key>/<name>'; extra arrays (e.g. category mean codes) under their own
    names. float32 storage."""
    if len(digest) != 32:
        raise ValueError("digest must be 32 bytes")
    entries: List[Tuple[str, np.ndarray]] = []
    for key, p in params.items():
        for name, arr in p.entries.items():
            entries.append((f"{key}/{name}", arr))
    for name, arr in (extra or {}).items():
        entries.append((name, np.asarray(arr, dtype=np.float64)))
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            raw_name = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw_name)))
            f.write(raw_name)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f4").tobytes())
        f.write(struct.pack("<I", epoch))
        f.write(digest)


def load_checkpoint(path, expected_digest: Optional[bytes] = None):
    """Returns (entries: name -> float64 array, epoch, digest). Warns when
    the stored digest differs from `expected_digest`."""
    entries: Dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CKPT_MAGIC:
            raise CheckpointFormatError(f"bad magic {magic!r} at byte offset 0")
        (count,) = struct.unpack("<I", _read_exact(f, 4, "entry count", exc=CheckpointFormatError))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length", exc=CheckpointFormatError))
            name = _read_exact(f, name_len, "entry name", exc=CheckpointFormatError).decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1, "rank", exc=CheckpointFormatError))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims", exc=CheckpointFormatError))
            size = int(np.prod(dims)) if rank else 1
            if size > 1 << 28:
                raise CheckpointFormatError(f"implausible entry size for {name!r}")
            raw = _read_exact(f, 4 * size, f"data of {name!r}", exc=CheckpointFormatError)
            entries[name] = (
                np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float64)
            )
        (epoch,) = struct.unpack("<I", _read_exact(f, 4, "epoch", exc=CheckpointFormatError))
        digest = _read_exact(f, 32, "config digest", exc=CheckpointFormatError)
    if expected_digest is not None and digest != expected_digest:
        warnings.warn("checkpoint config digest does not match the current config")
    return entries, epoch, digest


def group_params(entries: Mapping[str, np.ndarray]) -> Tuple[Dict[str, ModelParams], Dict[str, np.ndarray]]:
    """Split flat checkpoint entries back into ModelParams sets and extras.

    Keys look like 'encoder_incomplete/mlp1.w'; the role is the key prefix
    before the first underscore (or the whole key)."""
    grouped: Dict[str, Dict[str, np.ndarray]] = {}
    extra: Dict[str, np.ndarray] = {}
    for name, arr in entries.items():
        if "/" in name:
            key, pname = name.split("/", 1)
            if key.split("_")[0] in ("encoder", "decoder", "discriminator"):
                grouped.setdefault(key, {})[pname] = arr
                continue
        extra[name] = arr
    params = {
        key: ModelParams(key.split("_")[0], sub) for key, sub in grouped.items()
    }
    return params, extra
