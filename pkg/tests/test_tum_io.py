"""Dataset round trips: RGB-D layout, pairing, sidecars, calibration."""

import struct

import numpy as np
import pytest

from dynsplat.frames import EntityInfo, FlowField, Frame, Trajectory
from dynsplat.geometry import CameraPose, Intrinsics, RigidTransform
from dynsplat.skeleton import SkeletonObservation, rest_pose
from dynsplat.tum_io import (
    DEFAULT_CALIBRATION,
    _associate,
    load_sequence,
    read_flow,
    read_skeletons,
    write_flow,
    write_sequence,
    write_skeletons,
)

K_SMALL = Intrinsics(10.0, 11.0, 3.5, 2.5, 8, 6)


def _frames(rng, n=3, with_extras=True):
    frames = []
    for i in range(n):
        rgb = rng.random((6, 8, 3))
        depth = rng.uniform(0.5, 3.0, size=(6, 8))
        depth[0, 0] = 0.0
        seg = None
        flow = None
        skeletons = {}
        entities = ()
        if with_extras:
            seg = np.zeros((6, 8), np.int32)
            seg[2:4, 3:6] = 1
            entities = (EntityInfo(1, "item", "box1"),)
            du = rng.normal(size=(6, 8))
            dv = rng.normal(size=(6, 8))
            du[0, 0] = dv[0, 0] = np.nan
            du[5, 7] = dv[5, 7] = np.nan
            flow = FlowField(du, dv)
            pose = rest_pose()
            root = RigidTransform(
                np.array([0.8, 0.6, 0.0, 0.0]) / np.hypot(0.8, 0.6),
                rng.normal(size=3) + [0, 0, 3.0],
            )
            skeletons = {1: SkeletonObservation(
                type(pose)(root, pose.joints), np.array([4.0, 3.0])
            )}
        frames.append(Frame(0.1 * i, rgb, depth, seg, entities, flow, skeletons))
    return frames


class TestFlowFile:
    def test_round_trip(self, tmp_path, rng):
        du = rng.normal(size=(5, 7)).astype(np.float64)
        dv = rng.normal(size=(5, 7))
        du[1, 2] = np.nan
        dv[1, 2] = np.nan
        path = tmp_path / "f.flo2"
        write_flow(path, FlowField(du, dv))
        back = read_flow(path)
        assert back.du.shape == (5, 7)
        assert np.array_equal(np.isnan(back.du), np.isnan(du))
        ok = ~np.isnan(du)
        assert np.abs(back.du[ok] - du[ok]).max() < 1e-6
        assert np.abs(back.dv[ok] - dv[ok]).max() < 1e-6

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "f.flo2"
        path.write_bytes(struct.pack("<IIII", 0xDEAD, 2, 2, 0) + b"\0" * 32)
        with pytest.raises(ValueError):
            read_flow(path)

    def test_truncated_rejected(self, tmp_path, rng):
        path = tmp_path / "f.flo2"
        write_flow(path, FlowField(rng.normal(size=(4, 4)), rng.normal(size=(4, 4))))
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(ValueError):
            read_flow(path)


class TestSkeletonFile:
    def test_round_trip(self, tmp_path, rng):
        frames = _frames(rng, n=1)
        skeletons = frames[0].skeletons
        path = tmp_path / "s.json"
        write_skeletons(path, skeletons)
        back = read_skeletons(path)
        assert set(back) == {1}
        a, b = skeletons[1], back[1]
        assert np.abs(a.pose.root.q - b.pose.root.q).max() < 1e-12
        assert np.abs(a.pose.root.t - b.pose.root.t).max() < 1e-12
        assert np.abs(a.root_pixel - b.root_pixel).max() < 1e-12
        for ja, jb in zip(a.pose.joints, b.pose.joints):
            assert np.abs(ja.t - jb.t).max() < 1e-12


class TestSequenceRoundTrip:
    def test_full_round_trip(self, tmp_path, rng):
        frames = _frames(rng)
        gt = Trajectory()
        for i, fr in enumerate(frames):
            gt.append(fr.timestamp, CameraPose([1, 0, 0, 0], [0.01 * i, 0, 0]))
        write_sequence(tmp_path, frames, K_SMALL, gt, depth_scale=5000.0)

        seq = load_sequence(tmp_path)
        assert seq.report.matched == 3
        assert seq.report.dropped_rgb == 0
        assert not seq.report.used_default_calibration
        assert seq.depth_scale == 5000.0
        assert seq.intrinsics == K_SMALL
        assert len(seq.ground_truth) == 3

        for orig, back in zip(frames, seq.frames):
            assert abs(orig.timestamp - back.timestamp) < 1e-6
            assert np.abs(orig.rgb - back.rgb).max() <= 0.5 / 255 + 1e-9
            assert np.abs(orig.depth - back.depth).max() <= 0.5 / 5000 + 1e-9
            assert np.array_equal(orig.seg, back.seg)
            assert {e.label for e in back.entities} == {1}
            assert np.array_equal(orig.flow_to_next.valid, back.flow_to_next.valid)
            ok = orig.flow_to_next.valid
            assert np.abs(orig.flow_to_next.du[ok] - back.flow_to_next.du[ok]).max() < 1e-6
            assert set(back.skeletons) == {1}

    def test_zero_depth_survives(self, tmp_path, rng):
        frames = _frames(rng, with_extras=False)
        write_sequence(tmp_path, frames, K_SMALL)
        seq = load_sequence(tmp_path)
        assert seq.frames[0].depth[0, 0] == 0.0

    def test_default_calibration_fallback(self, tmp_path, rng):
        write_sequence(tmp_path, _frames(rng, with_extras=False), K_SMALL)
        (tmp_path / "calibration.txt").unlink()
        seq = load_sequence(tmp_path)
        assert seq.report.used_default_calibration
        fx, fy, cx, cy, w, h, scale = DEFAULT_CALIBRATION
        assert seq.intrinsics.fx == fx and seq.intrinsics.width == w
        assert seq.depth_scale == scale

    def test_missing_sidecar_counted(self, tmp_path, rng):
        frames = _frames(rng)
        write_sequence(tmp_path, frames, K_SMALL)
        masks = sorted((tmp_path / "masks").iterdir())
        masks[1].unlink()
        seq = load_sequence(tmp_path)
        assert seq.report.missing_sidecars == 1
        assert seq.frames[1].seg is None
        assert seq.frames[0].seg is not None

    def test_loader_invalidates_flow_without_depth(self, tmp_path, rng):
        frames = _frames(rng)
        write_sequence(tmp_path, frames, K_SMALL)
        # doctor the flow sidecar to claim validity where depth is missing
        fpath = sorted((tmp_path / "flows").iterdir())[0]
        flow = read_flow(fpath)
        flow.du[0, 0] = 1.0
        flow.dv[0, 0] = 1.0
        write_flow(fpath, flow)
        seq = load_sequence(tmp_path)
        assert not seq.frames[0].flow_to_next.valid[0, 0]


class TestAssociation:
    def test_near_timestamps_pair(self):
        pairs = _associate([0.0, 0.1, 0.2], [0.001, 0.099, 0.35], 0.02)
        assert sorted(pairs) == [(0, 0), (1, 1)]

    def test_greedy_takes_globally_best_first(self):
        # 0.011 vs 0.01 beats 0.0 vs 0.01; after pairing, 0.0 has no partner
        pairs = _associate([0.0, 0.011], [0.01], 0.02)
        assert pairs == [(1, 0)]

    def test_each_side_used_once(self):
        pairs = _associate([0.0, 0.005], [0.002, 0.004], 0.02)
        assert len(pairs) == 2
        assert len({i for i, _ in pairs}) == 2
        assert len({j for _, j in pairs}) == 2

    def test_tolerance_respected(self):
        assert _associate([0.0], [0.5], 0.02) == []

    def test_drop_counts_reported(self, tmp_path, rng):
        frames = _frames(rng, with_extras=False)
        write_sequence(tmp_path, frames, K_SMALL)
        # add an orphan rgb entry with no depth partner
        with open(tmp_path / "rgb.txt", "a") as f:
            f.write("9.000000 rgb/0.000000.png\n")
        seq = load_sequence(tmp_path)
        assert seq.report.matched == 3
        assert seq.report.dropped_rgb == 1
        assert seq.report.dropped_depth == 0
