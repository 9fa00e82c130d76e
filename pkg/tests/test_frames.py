"""Frame container, mask logic, and trajectory files."""

import numpy as np
import pytest

from dynsplat.frames import (
    EntityInfo,
    FlowField,
    Frame,
    Trajectory,
    erode_mask,
    new_observation_mask,
)
from dynsplat.geometry import CameraPose, quat_from_axis_angle


def _rgbd(h=6, w=8, depth_value=2.0):
    return np.full((h, w, 3), 0.5), np.full((h, w), depth_value)


def _open_by_hand(mask, radius):
    """Pure-python morphological opening with a disk, for cross-checking."""
    offs = [
        (dy, dx)
        for dy in range(-radius, radius + 1)
        for dx in range(-radius, radius + 1)
        if dy * dy + dx * dx <= radius * radius
    ]
    h, w = mask.shape

    def erode(m):
        out = np.zeros_like(m)
        for y in range(h):
            for x in range(w):
                out[y, x] = all(
                    0 <= y + dy < h and 0 <= x + dx < w and m[y + dy, x + dx]
                    for dy, dx in offs
                )
        return out

    def dilate(m):
        out = np.zeros_like(m)
        for y in range(h):
            for x in range(w):
                out[y, x] = any(
                    0 <= y + dy < h and 0 <= x + dx < w and m[y + dy, x + dx]
                    for dy, dx in offs
                )
        return out

    return dilate(erode(mask))


class TestFrame:
    def test_accepts_consistent_frame(self):
        rgb, depth = _rgbd()
        seg = np.zeros((6, 8), np.int32)
        seg[2:4, 2:4] = 3
        fr = Frame(0.0, rgb, depth, seg, (EntityInfo(3, "item"),))
        assert fr.height == 6 and fr.width == 8
        assert fr.entity_mask(3).sum() == 4
        assert fr.background_mask().sum() == 44

    def test_shape_mismatch_rejected(self):
        rgb, _ = _rgbd()
        with pytest.raises(ValueError):
            Frame(0.0, rgb, np.zeros((5, 8)))

    def test_undeclared_label_rejected(self):
        rgb, depth = _rgbd()
        seg = np.zeros((6, 8), np.int32)
        seg[0, 0] = 7
        with pytest.raises(ValueError, match="7"):
            Frame(0.0, rgb, depth, seg)

    def test_background_label_needs_no_declaration(self):
        rgb, depth = _rgbd()
        Frame(0.0, rgb, depth, np.zeros((6, 8), np.int32))

    def test_flow_wider_than_depth_rejected(self):
        rgb, depth = _rgbd()
        depth[1, 1] = 0.0
        flow = FlowField(np.zeros((6, 8)), np.zeros((6, 8)))
        with pytest.raises(ValueError):
            Frame(0.0, rgb, depth, flow_to_next=flow)

    def test_flow_nan_where_depth_missing_ok(self):
        rgb, depth = _rgbd()
        depth[1, 1] = 0.0
        du = np.zeros((6, 8))
        du[1, 1] = np.nan
        fr = Frame(0.0, rgb, depth, flow_to_next=FlowField(du, du.copy()))
        assert fr.flow_to_next.valid.sum() == 47

    def test_no_segmentation_means_all_background(self):
        rgb, depth = _rgbd()
        fr = Frame(0.0, rgb, depth)
        assert fr.background_mask().all()
        assert not fr.entity_mask(1).any()


class TestNewObservationMask:
    def test_uncovered_block_qualifies(self):
        entity = np.zeros((12, 12), bool)
        entity[3:8, 3:8] = True
        alpha = np.zeros((12, 12))
        got = new_observation_mask(entity, alpha)
        expect = _open_by_hand(entity, 1)
        assert np.array_equal(got, expect)
        assert got[5, 5]

    def test_covered_pixels_do_not_qualify(self):
        entity = np.ones((10, 10), bool)
        alpha = np.ones((10, 10)) * 0.9
        assert not new_observation_mask(entity, alpha).any()

    def test_threshold_boundary(self):
        entity = np.ones((8, 8), bool)
        args = dict(opening_radius=0)
        assert not new_observation_mask(entity, np.full((8, 8), 0.5), **args).any()
        assert new_observation_mask(entity, np.full((8, 8), 0.49), **args).all()

    def test_speckle_removed(self):
        entity = np.zeros((9, 9), bool)
        entity[4, 4] = True
        assert not new_observation_mask(entity, np.zeros((9, 9))).any()

    def test_matches_hand_opening_on_random_masks(self, rng):
        for _ in range(5):
            entity = rng.random((10, 11)) < 0.45
            alpha = rng.random((10, 11))
            got = new_observation_mask(entity, alpha)
            expect = _open_by_hand(entity & (alpha < 0.5), 1)
            assert np.array_equal(got, expect)

    def test_opening_disabled(self):
        entity = np.zeros((5, 5), bool)
        entity[2, 2] = True
        got = new_observation_mask(entity, np.zeros((5, 5)), opening_radius=0)
        assert got[2, 2] and got.sum() == 1


class TestErode:
    def test_zero_radius_is_identity(self, rng):
        m = rng.random((7, 7)) < 0.5
        assert np.array_equal(erode_mask(m, 0), m)

    def test_disk_erosion_by_hand(self):
        m = np.zeros((9, 9), bool)
        m[2:7, 2:7] = True
        got = erode_mask(m, 1)
        offs = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)]
        expect = np.zeros_like(m)
        for y in range(9):
            for x in range(9):
                expect[y, x] = all(
                    0 <= y + dy < 9 and 0 <= x + dx < 9 and m[y + dy, x + dx]
                    for dy, dx in offs
                )
        assert np.array_equal(got, expect)


class TestTrajectory:
    def _make(self, n, rng):
        traj = Trajectory()
        for i in range(n):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            traj.append(0.1 * i, CameraPose(q, rng.normal(size=3)))
        return traj

    def test_round_trip(self, tmp_path, rng):
        traj = self._make(5, rng)
        path = tmp_path / "traj.txt"
        traj.write(path)
        back = Trajectory.read(path)
        assert len(back) == 5
        assert np.abs(np.array(traj.timestamps) - back.timestamps).max() < 1e-9
        for pa, pb in zip(traj.poses, back.poses):
            assert np.abs(pa.t - pb.t).max() < 1e-8
            dq = min(np.abs(pa.q - pb.q).max(), np.abs(pa.q + pb.q).max())
            assert dq < 1e-8

    def test_reader_skips_comments_and_blanks(self, tmp_path):
        path = tmp_path / "traj.txt"
        path.write_text(
            "# a comment\n\n1.5 1 2 3 0 0 0 1\n# another\n2.5 4 5 6 0 0 0 1\n"
        )
        traj = Trajectory.read(path)
        assert len(traj) == 2
        assert np.array_equal(traj.positions()[0], [1.0, 2.0, 3.0])

    def test_positions_shape(self, rng):
        assert self._make(4, rng).positions().shape == (4, 3)

    def test_quaternion_order_in_file(self, tmp_path):
        # file rows are: ts tx ty tz qx qy qz qw
        traj = Trajectory()
        q = quat_from_axis_angle([0, 0, 1], np.pi / 2)  # w first in memory
        traj.append(0.0, CameraPose(q, [1, 2, 3]))
        path = tmp_path / "traj.txt"
        traj.write(path)
        row = [
            line for line in path.read_text().splitlines()
            if line and not line.startswith("#")
        ][0]
        vals = [float(x) for x in row.split()]
        assert vals[1:4] == [1.0, 2.0, 3.0]
        assert abs(vals[7] - np.cos(np.pi / 4)) < 1e-8  # qw last
        assert abs(vals[6] - np.sin(np.pi / 4)) < 1e-8
