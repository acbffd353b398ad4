"""Materialize a split manifest into actual clouds and bundle them with
their roles. Generation is deterministic per (seed, shape index) so worker
parallelism (PCDISTILL_WORKERS) never changes the output.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .dataio import (
    PRIMITIVES,
    ManifestItem,
    ShapeSpec,
    SplitManifest,
    gen_complete,
    make_partial,
    read_manifest,
    read_pcb,
    write_manifest,
    write_pcb,
)
from .geometry import PointCloud

MANIFEST_NAME = "manifest.txt"
CLOUDS_NAME = "clouds.pcb"


def _shape_index(item: ManifestItem) -> int:
    if item.pair_id is not None:
        return item.pair_id
    return int(item.id[1:6])


def _derive_seed(seed: int, shape_index: int) -> int:
    return seed * 1_000_003 + shape_index * 2


def _gen_shape(args) -> Tuple[int, PointCloud, PointCloud]:
    seed, sid, category, n_points = args
    base = _derive_seed(seed, sid)
    spec = ShapeSpec(PRIMITIVES[category % len(PRIMITIVES)], seed=base, n_points=n_points)
    complete = gen_complete(spec)
    partial = make_partial(complete, base + 1, min_survivors=min(32, max(4, n_points // 8)))
    return sid, complete, partial


def env_workers() -> int:
    raw = os.environ.get("PCDISTILL_WORKERS", "0")
    try:
        workers = int(raw)
    except ValueError:
        raise ValueError(f"PCDISTILL_WORKERS must be an integer >= 0, got {raw!r}")
    if workers < 0:
        raise ValueError("PCDISTILL_WORKERS must be >= 0")
    return workers


@dataclass
class DatasetBundle:
    manifest: SplitManifest
    clouds: Dict[str, PointCloud]  # item id -> cloud

    def role_clouds(self, role: str) -> List[PointCloud]:
        return [self.clouds[it.id] for it in self.manifest.by_role(role)]

    def pairs(self, kind: str = "paired") -> List[Tuple[PointCloud, PointCloud]]:
        """(incomplete, complete) cloud pairs for kind 'paired' or 'test'."""
        return [
            (self.clouds[inc.id], self.clouds[comp.id])
            for inc, comp in self.manifest.pairs(kind)
        ]


def generate_dataset(
    manifest: SplitManifest,
    seed: int,
    n_points: int = 2048,
    workers: Optional[int] = None,
) -> DatasetBundle:
    if workers is None:
        workers = env_workers()
    shapes: Dict[int, int] = {}
    for it in manifest.items:
        shapes.setdefault(_shape_index(it), it.category)
    jobs = [(seed, sid, cat, n_points) for sid, cat in sorted(shapes.items())]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_gen_shape, jobs, chunksize=8))
    else:
        results = [_gen_shape(j) for j in jobs]
    by_shape = {sid: (comp, part) for sid, comp, part in results}

    clouds: Dict[str, PointCloud] = {}
    for it in manifest.items:
        comp, part = by_shape[_shape_index(it)]
        cloud = comp if it.role.endswith("_complete") else part
        clouds[it.id] = PointCloud(
            cloud.points, category=it.category, id=it.id, pair_id=it.pair_id
        )
    return DatasetBundle(manifest, clouds)


def save_dataset(directory, bundle: DatasetBundle):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_manifest(directory / MANIFEST_NAME, bundle.manifest)
    write_pcb(directory / CLOUDS_NAME, [bundle.clouds[it.id] for it in bundle.manifest.items])


def load_dataset(directory) -> DatasetBundle:
    directory = Path(directory)
    manifest = read_manifest(directory / MANIFEST_NAME)
    clouds = read_pcb(directory / CLOUDS_NAME)
    if len(clouds) != len(manifest.items):
        raise ValueError(
            f"{directory}: cloud count {len(clouds)} does not match manifest "
            f"({len(manifest.items)} items)"
        )
    by_id = {
        it.id: PointCloud(c.points, category=it.category, id=it.id, pair_id=it.pair_id)
        for it, c in zip(manifest.items, clouds)
    }
    return DatasetBundle(manifest, by_id)
