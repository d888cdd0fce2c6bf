import json
import time

import numpy as np
import pytest
from plyfile import PlyData

from conftest import random_map
from oracles import nearest_pairs
from onlinesplat import io
from onlinesplat.core import CameraFrame, GaussianMap, Intrinsics, Pose
from onlinesplat.nvs import SelectionReport

FIELDS = ("means", "log_scales", "opacity_logits", "colors", "log_betas")


def _assert_round_trip(a, b, atol=1e-6):
    assert len(a) == len(b)
    for f in FIELDS:
        np.testing.assert_allclose(getattr(b, f), getattr(a, f), atol=atol, rtol=0, err_msg=f)
    # q and -q are the same rotation
    dots = np.abs(np.sum(a.quats * b.quats, axis=1))
    np.testing.assert_allclose(dots, 1.0, atol=atol)
    np.testing.assert_allclose(b.quats, a.quats, atol=atol)
    np.testing.assert_array_equal(b.source_kf, a.source_kf)


class TestPly:
    def test_empty_map(self, tmp_path):
        p = tmp_path / "e.ply"
        io.save_ply(GaussianMap(), p)
        m = io.load_ply(p)
        assert len(m) == 0
        assert PlyData.read(str(p))["vertex"].count == 0

    def test_single(self, tmp_path, rng):
        m = random_map(rng, 1)
        io.save_ply(m, tmp_path / "one.ply")
        _assert_round_trip(m, io.load_ply(tmp_path / "one.ply"))

    def test_10k_round_trip_and_external_reader(self, tmp_path, rng):
        m = random_map(rng, 10_000, anchor=3)
        m.keyframe_anchors[3] = Pose.exp(np.array([0.1, 0.2, 0.3, 0.01, 0.02, 0.03]))
        p = tmp_path / "big.ply"
        t0 = time.perf_counter()
        io.save_ply(m, p)
        back = io.load_ply(p)
        elapsed = time.perf_counter() - t0
        assert elapsed < 1.0
        _assert_round_trip(m, back)
        assert back.keyframe_anchors[3].same_as(m.keyframe_anchors[3], 1e-12)

        ply = PlyData.read(str(p))
        assert ply.text is False and ply.byte_order == "<"
        v = ply["vertex"]
        assert v.count == 10_000
        names = [pr.name for pr in v.properties]
        assert names == [n for n, _ in io.PLY_PROPERTIES]
        for pr in v.properties:
            assert pr.val_dtype in ("f4", "i4", "float32", "int32")
        np.testing.assert_allclose(v["x"], m.means[:, 0], atol=1e-6)
        np.testing.assert_allclose(v["scale_1"], m.log_scales[:, 1], atol=1e-6)
        np.testing.assert_allclose(v["opacity"], m.opacity_logits, atol=1e-6)
        np.testing.assert_allclose(v["beta"], m.log_betas, atol=1e-6)
        np.testing.assert_array_equal(v["source_kf"], m.source_kf)

    def test_file_size_prediction(self, tmp_path, rng):
        m = random_map(rng, 37)
        p = tmp_path / "s.ply"
        io.save_ply(m, p)
        assert p.stat().st_size == io.ply_size(m)

    def test_sidecar_records_storage(self, tmp_path, rng):
        p = tmp_path / "m.ply"
        io.save_ply(random_map(rng, 3), p)
        meta = json.loads((tmp_path / "m.ply.meta.json").read_text())
        assert meta["storage"]["opacity"] == "logit" and meta["storage"]["scale"] == "log"

    def test_malformed_header(self, tmp_path):
        p = tmp_path / "bad.ply"
        p.write_bytes(b"plx\nformat binary_little_endian 1.0\nend_header\n")
        with pytest.raises(io.PlyHeaderError):
            io.load_ply(p)
        p.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n")
        with pytest.raises(io.PlyHeaderError):
            io.load_ply(p)

    def test_missing_property(self, tmp_path):
        p = tmp_path / "miss.ply"
        p.write_bytes(b"ply\nformat binary_little_endian 1.0\nelement vertex 0\nproperty float x\nend_header\n")
        with pytest.raises(io.PlyMissingPropertyError):
            io.load_ply(p)

    def test_truncated(self, tmp_path, rng):
        p = tmp_path / "t.ply"
        io.save_ply(random_map(rng, 5), p)
        data = p.read_bytes()
        p.write_bytes(data[:-7])
        with pytest.raises(io.PlyTruncatedError):
            io.load_ply(p)

    def test_errors_are_distinct(self):
        kinds = {io.PlyHeaderError, io.PlyMissingPropertyError, io.PlyTruncatedError}
        assert len(kinds) == 3 and all(issubclass(k, io.PlyError) for k in kinds)


class TestImagesAndReports:
    def test_black(self, tmp_path):
        io.save_png(np.zeros((4, 5, 3)), tmp_path / "b.png")
        assert np.all(io.load_png(tmp_path / "b.png") == 0)

    def test_quantization_bound(self, tmp_path, rng):
        img = rng.uniform(size=(16, 9, 3))
        io.save_png(img, tmp_path / "r.png")
        assert np.abs(io.load_png(tmp_path / "r.png") - img).max() <= 1 / 255

    def test_half_to_even(self):
        np.testing.assert_array_equal(io.to_uint8(np.array([0.5 / 255, 1.5 / 255, 2.5 / 255])), [0, 2, 2])

    def test_selection_report_round_trip(self, tmp_path):
        r = SelectionReport([1, 5, 9], [0.5, 2.0, 1.0], [5, 9, 1], [5, 9, 1], [5, 9], [5, 9, 1])
        io.save_report(r, tmp_path / "sel.json")
        assert SelectionReport.from_dict(json.loads((tmp_path / "sel.json").read_text())) == r

    def test_report_key_order_deterministic(self):
        a = io.dumps_report({"b": 1, "a": np.float64(2.5), "c": np.arange(2)})
        b = io.dumps_report({"c": [0, 1], "a": 2.5, "b": 1})
        assert a == b

    def test_unwritable(self, tmp_path):
        with pytest.raises(OSError):
            io.save_png(np.zeros((2, 2, 3)), tmp_path / "missing" / "x.png")


def _write_listing(root, name, times, fmt):
    lines = ["# comment"] + [fmt(t) for t in times]
    (root / name).write_text("\n".join(lines) + "\n")


def _synthetic_tum(root, n=10, depth_offset=0.0, jitter=None, rng=None):
    intr = Intrinsics.from_fov(8, 6)
    frames = []
    for k in range(n):
        img = np.full((6, 8, 3), k / n)
        depth = np.full((6, 8), 1.0 + 0.1 * k)
        pose = Pose.exp(np.array([0.1 * k, 0, 0, 0, 0.05 * k, 0]))
        frames.append(CameraFrame(k, pose, intr, img, depth, timestamp=1000.0 + k / 30))
    io.write_tum(root, frames)
    if depth_offset or jitter:
        rgb_t = [1000.0 + k / 30 for k in range(n)]
        dep_t = [t + depth_offset + (rng.uniform(-jitter, jitter) if jitter else 0.0) for t in rgb_t]
        lines = (root / "depth.txt").read_text().splitlines()[1:]
        paths = [l.split()[1] for l in lines]
        _write_listing(root, "depth.txt", range(n), lambda k: f"{dep_t[k]:.6f} {paths[k]}")
        return intr, frames, rgb_t, dep_t
    return intr, frames, None, None


class TestTum:
    def test_aligned(self, tmp_path):
        intr, frames, _, _ = _synthetic_tum(tmp_path)
        seq = io.load_tum(tmp_path, intrinsics=intr)
        assert len(seq) == 10 and seq.dropped == 0
        f = seq.frame(3)
        np.testing.assert_allclose(f.depth, frames[3].depth, atol=1 / 5000)
        assert f.pose.same_as(frames[3].pose, 1e-8)
        assert np.abs(f.image - frames[3].image).max() <= 1 / 255

    def test_offset_depth_raises(self, tmp_path):
        intr, *_ = _synthetic_tum(tmp_path, depth_offset=0.5)
        with pytest.raises(io.TumAssociationError):
            io.load_tum(tmp_path, max_dt=0.02, intrinsics=intr)

    def test_jitter_matches_brute_force(self, tmp_path):
        rng = np.random.default_rng(3)
        intr, _, rgb_t, dep_t = _synthetic_tum(tmp_path, n=100, jitter=0.005, rng=rng)
        seq = io.load_tum(tmp_path, intrinsics=intr)
        expect = nearest_pairs(rgb_t, dep_t, 0.02)
        assert [(r, d) for r, d, _ in seq.associations] == expect

    def test_associate_matches_oracle_random(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            a = np.sort(rng.uniform(0, 10, rng.integers(5, 40)))
            b = np.sort(rng.uniform(0, 10, rng.integers(5, 40)))
            a = np.unique(a)
            b = np.unique(b)
            got = set(io.associate(a, b, 0.05))
            # every mutual nearest pair within range is a greedy pair
            assert set(nearest_pairs(a, b, 0.05)) <= got
            for i, j in got:
                assert abs(a[i] - b[j]) <= 0.05

    def test_unparseable_line_reports_line_number(self, tmp_path):
        _synthetic_tum(tmp_path, n=3)
        text = (tmp_path / "groundtruth.txt").read_text().splitlines()
        text[2] = "1000.03 a b c d e f g"
        (tmp_path / "groundtruth.txt").write_text("\n".join(text) + "\n")
        with pytest.raises(io.TumFormatError, match="groundtruth.txt:3"):
            io.load_tum(tmp_path)

    def test_missing_file(self, tmp_path):
        _synthetic_tum(tmp_path, n=3)
        (tmp_path / "depth.txt").unlink()
        with pytest.raises(FileNotFoundError):
            io.load_tum(tmp_path)

    def test_unmatched_entries_dropped(self, tmp_path):
        intr, *_ = _synthetic_tum(tmp_path, n=6)
        lines = (tmp_path / "depth.txt").read_text().splitlines()
        (tmp_path / "depth.txt").write_text("\n".join(lines[:-2]) + "\n")
        seq = io.load_tum(tmp_path, intrinsics=intr)
        assert len(seq) == 4 and seq.dropped == 2
