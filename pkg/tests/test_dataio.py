import numpy as np
import pytest

from pcdistill import dataio, datasetgen
from pcdistill.dataio import (
    CheckpointFormatError,
    ManifestItem,
    PcbFormatError,
    PlyFormatError,
    ShapeSpec,
    SplitManifest,
    build_splits,
    config_digest,
    gen_complete,
    group_params,
    load_checkpoint,
    make_partial,
    read_manifest,
    read_pcb,
    read_ply,
    save_checkpoint,
    write_manifest,
    write_pcb,
    write_ply,
)
from pcdistill.geometry import PointCloud
from pcdistill.nets import ArchConfig, ModelParams, encoder_forward, init_params


class TestGenComplete:
    def test_sphere_unit_norms(self):
        cloud = gen_complete(ShapeSpec("sphere", seed=0, n_points=256))
        norms = np.linalg.norm(cloud.points, axis=1)
        # normalized sphere samples all sit on the unit surface
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    def test_deterministic(self):
        a = gen_complete(ShapeSpec("cylinder", seed=7, n_points=128))
        b = gen_complete(ShapeSpec("cylinder", seed=7, n_points=128))
        assert np.array_equal(a.points, b.points)

    def test_cuboid_points_on_faces(self):
        cloud = gen_complete(ShapeSpec("cuboid", seed=3, n_points=512), rotate=False)
        pts = cloud.points
        ext = np.abs(pts).max(axis=0)
        on_face = np.isclose(np.abs(pts), ext, atol=1e-6).any(axis=1)
        assert on_face.all()

    def test_category_and_size(self):
        for i, prim in enumerate(dataio.PRIMITIVES):
            cloud = gen_complete(ShapeSpec(prim, seed=i, n_points=200))
            assert len(cloud) == 200
            assert cloud.category == i

    def test_rejects_unknown_primitive(self):
        with pytest.raises(ValueError):
            ShapeSpec("torus", seed=0)


class TestMakePartial:
    def test_survivors_subset_of_complete(self):
        complete = gen_complete(ShapeSpec("sphere", seed=1, n_points=256))
        partial = make_partial(complete, view_seed=5)
        assert len(partial) == len(complete)
        # every partial point equals some complete point exactly
        eq = (
            np.abs(partial.points[:, None, :] - complete.points[None, :, :]).max(-1) == 0
        )
        assert eq.any(axis=1).all()

    def test_proper_subset(self):
        complete = gen_complete(ShapeSpec("cone", seed=2, n_points=256))
        partial = make_partial(complete, view_seed=9)
        assert len(np.unique(partial.points, axis=0)) < len(complete)

    def test_deterministic(self):
        complete = gen_complete(ShapeSpec("cuboid", seed=4, n_points=128))
        a = make_partial(complete, view_seed=11)
        b = make_partial(complete, view_seed=11)
        assert np.array_equal(a.points, b.points)

    def test_metadata_preserved(self):
        complete = PointCloud(
            gen_complete(ShapeSpec("sphere", seed=5, n_points=64)).points,
            category=3,
            id="x",
            pair_id=12,
        )
        partial = make_partial(complete, view_seed=1)
        assert (partial.category, partial.id, partial.pair_id) == (3, "x", 12)

    def test_impossible_view_errors(self):
        tiny = PointCloud(np.zeros((1, 3)) + [[0.1, 0.2, 0.3]])
        with pytest.raises(dataio.PartialViewError):
            make_partial(tiny, view_seed=0, min_survivors=32)


class TestBuildSplits:
    def test_full_fraction_all_paired(self):
        man = build_splits(10, 1.0, seed=0, num_test=2)
        roles = {it.role for it in man.items}
        assert "unpaired_complete" not in roles and "unpaired_incomplete" not in roles
        assert len(man.by_role("paired_complete")) == 10

    def test_fraction_arithmetic(self):
        man = build_splits(200, 0.05, seed=0)
        assert len(man.by_role("paired_complete")) == 10
        assert len(man.by_role("paired_incomplete")) == 10

    def test_count_audit(self):
        man = build_splits(100, 0.1, extra_unpaired_complete=5,
                           extra_unpaired_incomplete=7, seed=3, num_test=9)
        n_paired = len(man.by_role("paired_complete"))
        total = (
            2 * n_paired
            + len(man.by_role("unpaired_complete"))
            + len(man.by_role("unpaired_incomplete"))
            + len(man.by_role("test_complete"))
            + len(man.by_role("test_incomplete"))
        )
        assert total == len(man.items)
        assert len(man.by_role("test_complete")) == 9

    def test_tiny_fraction_clamped_with_warning(self):
        with pytest.warns(UserWarning):
            man = build_splits(10, 0.01, seed=0)
        assert len(man.by_role("paired_complete")) == 1

    def test_pools_disjoint_by_shape(self):
        man = build_splits(50, 0.1, seed=1, num_test=10)
        def shapes(*roles):
            out = set()
            for role in roles:
                for it in man.by_role(role):
                    out.add(int(it.id[1:6]))
            return out
        paired = shapes("paired_complete", "paired_incomplete")
        uc = shapes("unpaired_complete")
        ui = shapes("unpaired_incomplete")
        test = shapes("test_complete", "test_incomplete")
        assert paired & uc == set() and paired & ui == set() and uc & ui == set()
        assert test & (paired | uc | ui) == set()

    def test_deterministic(self):
        a = build_splits(40, 0.2, seed=9)
        b = build_splits(40, 0.2, seed=9)
        assert [(i.id, i.category, i.role, i.pair_id) for i in a.items] == [
            (i.id, i.category, i.role, i.pair_id) for i in b.items
        ]

    def test_manifest_invariant_enforced(self):
        with pytest.raises(ValueError):
            SplitManifest(
                [ManifestItem("a", 0, "paired_incomplete", pair_id=1)], 0.5
            )

    def test_manifest_round_trip(self, tmp_path):
        man = build_splits(20, 0.25, seed=2, num_test=3)
        path = tmp_path / "manifest.txt"
        write_manifest(path, man)
        back = read_manifest(path)
        assert back.paired_fraction == man.paired_fraction
        assert [(i.id, i.category, i.role, i.pair_id) for i in back.items] == [
            (i.id, i.category, i.role, i.pair_id) for i in man.items
        ]


class TestPly:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        cloud = PointCloud(rng.normal(size=(50, 3)), category=2, pair_id=5)
        path = tmp_path / "c.ply"
        write_ply(path, cloud)
        back = read_ply(path)
        np.testing.assert_allclose(back.points, cloud.points, atol=1e-6)
        assert back.category == 2 and back.pair_id == 5

    def test_golden_hand_written(self, tmp_path):
        path = tmp_path / "hand.ply"
        path.write_text(
            "ply\nformat ascii 1.0\nelement vertex 3\n"
            "property float x\nproperty float y\nproperty float z\n"
            "end_header\n0 0 0\n1 0 0\n0.5 0.25 -0.125\n"
        )
        cloud = read_ply(path)
        np.testing.assert_array_equal(
            cloud.points, [[0, 0, 0], [1, 0, 0], [0.5, 0.25, -0.125]]
        )

    def test_missing_end_header_rejected(self, tmp_path):
        path = tmp_path / "bad.ply"
        path.write_text("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n")
        with pytest.raises(PlyFormatError):
            read_ply(path)

    def test_wrong_properties_rejected(self, tmp_path):
        path = tmp_path / "bad.ply"
        path.write_text(
            "ply\nformat ascii 1.0\nelement vertex 1\n"
            "property float x\nproperty float y\nend_header\n0 0\n"
        )
        with pytest.raises(PlyFormatError):
            read_ply(path)

    def test_non_numeric_vertex_reports_line(self, tmp_path):
        path = tmp_path / "bad.ply"
        path.write_text(
            "ply\nformat ascii 1.0\nelement vertex 1\n"
            "property float x\nproperty float y\nproperty float z\n"
            "end_header\n0 zero 0\n"
        )
        with pytest.raises(PlyFormatError, match=":8"):
            read_ply(path)


class TestPcb:
    def test_empty_list_eight_bytes(self, tmp_path):
        path = tmp_path / "e.pcb"
        write_pcb(path, [])
        assert path.stat().st_size == 8
        assert read_pcb(path) == []

    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        clouds = [
            PointCloud(rng.normal(size=(10, 3)).astype(np.float32), category=1, pair_id=4),
            PointCloud(rng.normal(size=(7, 3)).astype(np.float32)),
        ]
        path = tmp_path / "c.pcb"
        write_pcb(path, clouds)
        first = path.read_bytes()
        back = read_pcb(path)
        for orig, got in zip(clouds, back):
            assert np.array_equal(orig.points.astype(np.float32), got.points.astype(np.float32))
            assert got.category == orig.category and got.pair_id == orig.pair_id
        write_pcb(path, back)
        assert path.read_bytes() == first

    def test_corrupted_magic_rejected(self, tmp_path):
        path = tmp_path / "c.pcb"
        write_pcb(path, [])
        data = bytearray(path.read_bytes())
        data[0] = ord("X")
        path.write_bytes(bytes(data))
        with pytest.raises(PcbFormatError, match="magic"):
            read_pcb(path)

    def test_truncation_reports_offset(self, tmp_path):
        rng = np.random.default_rng(2)
        path = tmp_path / "c.pcb"
        write_pcb(path, [PointCloud(rng.normal(size=(5, 3)))])
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(PcbFormatError, match="offset"):
            read_pcb(path)


TINY = ArchConfig(latent_dim=6, enc_h1=3, enc_h2=4, enc_g1=5, dec_h1=4, dec_h2=4, n_points=4)


class TestCheckpoint:
    def test_round_trip_forward_identical(self, tmp_path):
        enc = init_params("encoder", 0, TINY)
        path = tmp_path / "c.rpdc"
        digest = config_digest({"a": 1})
        save_checkpoint(path, {"encoder_incomplete": enc}, epoch=12, digest=digest)
        entries, epoch, got_digest = load_checkpoint(path, expected_digest=digest)
        assert epoch == 12 and got_digest == digest
        params, extra = group_params(entries)
        restored = params["encoder_incomplete"]
        assert restored.role == "encoder"
        cloud = PointCloud(np.random.default_rng(3).normal(size=(5, 3)))
        # forwards agree at float32 storage precision
        enc32 = ModelParams(
            "encoder", {k: v.astype(np.float32).astype(np.float64) for k, v in enc.entries.items()}
        )
        assert np.array_equal(
            encoder_forward(restored, cloud).values, encoder_forward(enc32, cloud).values
        )

    def test_empty_params_round_trip(self, tmp_path):
        path = tmp_path / "c.rpdc"
        save_checkpoint(path, {}, epoch=0, digest=bytes(32))
        entries, epoch, digest = load_checkpoint(path)
        assert entries == {} and epoch == 0 and digest == bytes(32)

    def test_extra_arrays_round_trip(self, tmp_path):
        path = tmp_path / "c.rpdc"
        mean = np.arange(6.0)
        save_checkpoint(path, {}, epoch=1, digest=bytes(32), extra={"cat_mean/2": mean})
        entries, _, _ = load_checkpoint(path)
        _, extra = group_params(entries)
        np.testing.assert_allclose(extra["cat_mean/2"], mean)

    def test_digest_mismatch_warns(self, tmp_path):
        path = tmp_path / "c.rpdc"
        save_checkpoint(path, {}, epoch=0, digest=config_digest({"a": 1}))
        with pytest.warns(UserWarning, match="digest"):
            load_checkpoint(path, expected_digest=config_digest({"a": 2}))

    def test_tampered_dims_rejected(self, tmp_path):
        enc = init_params("encoder", 1, TINY)
        path = tmp_path / "c.rpdc"
        save_checkpoint(path, {"encoder": enc}, epoch=1, digest=bytes(32))
        data = bytearray(path.read_bytes())
        # first entry: magic(4) + count(4) + namelen(2) + name + rank(1), dims follow
        name_len = int.from_bytes(data[8:10], "little")
        dim_off = 10 + name_len + 1
        data[dim_off : dim_off + 4] = (0xFFFFFF).to_bytes(4, "little")
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "c.rpdc"
        path.write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)


class TestDatasetBundle:
    def test_generate_and_round_trip(self, tmp_path):
        man = build_splits(8, 0.25, seed=0, num_test=2)
        bundle = datasetgen.generate_dataset(man, seed=0, n_points=64)
        assert len(bundle.clouds) == len(man.items)
        datasetgen.save_dataset(tmp_path / "d", bundle)
        back = datasetgen.load_dataset(tmp_path / "d")
        for it in man.items:
            a, b = bundle.clouds[it.id], back.clouds[it.id]
            np.testing.assert_array_equal(
                a.points.astype(np.float32), b.points.astype(np.float32)
            )
            assert b.category == it.category and b.pair_id == it.pair_id

    def test_pairs_share_shape(self):
        man = build_splits(8, 0.5, seed=1, num_test=2)
        bundle = datasetgen.generate_dataset(man, seed=1, n_points=64)
        for partial, complete in bundle.pairs("paired"):
            assert partial.pair_id == complete.pair_id
            eq = (
                np.abs(partial.points[:, None, :] - complete.points[None, :, :]).max(-1)
                < 1e-12
            )
            assert eq.any(axis=1).all()

    def test_worker_parallelism_is_reproducible(self):
        man = build_splits(6, 0.5, seed=2, num_test=1)
        serial = datasetgen.generate_dataset(man, seed=2, n_points=32, workers=0)
        parallel = datasetgen.generate_dataset(man, seed=2, n_points=32, workers=2)
        for it in man.items:
            assert np.array_equal(serial.clouds[it.id].points, parallel.clouds[it.id].points)
