"""Dataset directory ingestion and export.

Layout, following the common RGB-D benchmark convention:

    rgb.txt / depth.txt        "timestamp filename" listings
    rgb/*.png                  8-bit color
    depth/*.png                16-bit depth, scaled by depth_scale
    groundtruth.txt            optional "ts tx ty tz qx qy qz qw" rows
    calibration.txt            fx fy cx cy width height depth_scale
    masks/<ts>.png             optional 8-bit entity label maps
    flows/<ts>.flo2            optional dense forward flow (see below)
    skeletons/<ts>.json        optional per-figure skeletal estimates
    entities.json              declares non-background labels

Color and depth rows are associated by nearest timestamp within a tolerance;
unmatched rows are dropped and counted. Flow files carry a 16-byte header
(magic, height, width, reserved u32s) followed by (H, W, 2) little-endian
float32 with NaN marking invalid pixels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .frames import BACKGROUND_LABEL, EntityInfo, FlowField, Frame, Trajectory
from .geometry import Intrinsics, RigidTransform
from .skeleton import N_JOINTS, SkeletonObservation, SkeletonPose

PAIRING_TOLERANCE = 0.02  # seconds

_FLOW_MAGIC = 0x464C4F32  # "FLO2"

# fallback calibration for sequences without a calibration file (the common
# 640x480 benchmark intrinsics)
DEFAULT_CALIBRATION = (525.0, 525.0, 319.5, 239.5, 640, 480, 5000.0)


@dataclass
class LoadReport:
    matched: int = 0
    dropped_rgb: int = 0
    dropped_depth: int = 0
    missing_sidecars: int = 0
    used_default_calibration: bool = False


@dataclass
class Sequence:
    frames: list[Frame]
    intrinsics: Intrinsics
    depth_scale: float
    ground_truth: Trajectory | None
    report: LoadReport = field(default_factory=LoadReport)


def _ts_name(ts: float) -> str:
    return f"{ts:.6f}"


# ---------------------------------------------------------------------------
# flow sidecar
# ---------------------------------------------------------------------------


def write_flow(path, flow: FlowField) -> None:
    h, w = flow.du.shape
    header = np.array([_FLOW_MAGIC, h, w, 0], dtype="<u4")
    data = np.stack([flow.du, flow.dv], axis=-1).astype("<f4")
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(data.tobytes())


def read_flow(path) -> FlowField:
    with open(path, "rb") as f:
        header = np.frombuffer(f.read(16), dtype="<u4")
        if header[0] != _FLOW_MAGIC:
            raise ValueError(f"{path}: bad flow magic 0x{header[0]:08x}")
        h, w = int(header[1]), int(header[2])
        data = np.frombuffer(f.read(h * w * 2 * 4), dtype="<f4").reshape(h, w, 2)
    return FlowField(data[..., 0].astype(np.float64), data[..., 1].astype(np.float64))


# ---------------------------------------------------------------------------
# skeleton sidecar
# ---------------------------------------------------------------------------


def _tf_to_list(tf) -> list[float]:
    return [*map(float, tf.q), *map(float, tf.t)]


def _tf_from_list(vals) -> RigidTransform:
    return RigidTransform(vals[:4], vals[4:])


def write_skeletons(path, skeletons: dict[int, SkeletonObservation]) -> None:
    doc = {}
    for label, obs in skeletons.items():
        doc[str(label)] = {
            "root": _tf_to_list(obs.pose.root),
            "joints": [_tf_to_list(j) for j in obs.pose.joints],
            "root_pixel": [float(obs.root_pixel[0]), float(obs.root_pixel[1])],
        }
    Path(path).write_text(json.dumps(doc, indent=1))


def read_skeletons(path) -> dict[int, SkeletonObservation]:
    doc = json.loads(Path(path).read_text())
    out = {}
    for label, rec in doc.items():
        joints = tuple(_tf_from_list(j) for j in rec["joints"])
        if len(joints) != N_JOINTS - 1:
            raise ValueError(f"{path}: expected {N_JOINTS - 1} joints")
        pose = SkeletonPose(_tf_from_list(rec["root"]), joints)
        out[int(label)] = SkeletonObservation(pose, np.array(rec["root_pixel"]))
    return out


# ---------------------------------------------------------------------------
# sequence writer
# ---------------------------------------------------------------------------


def write_sequence(path, frames: list[Frame], K: Intrinsics,
                   ground_truth: Trajectory | None = None,
                   depth_scale: float = 5000.0) -> None:
    root = Path(path)
    for sub in ("rgb", "depth"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    any_masks = any(f.seg is not None for f in frames)
    any_flows = any(f.flow_to_next is not None for f in frames)
    any_skel = any(f.skeletons for f in frames)
    if any_masks:
        (root / "masks").mkdir(exist_ok=True)
    if any_flows:
        (root / "flows").mkdir(exist_ok=True)
    if any_skel:
        (root / "skeletons").mkdir(exist_ok=True)

    rgb_rows, depth_rows = [], []
    entities: dict[int, EntityInfo] = {}
    for fr in frames:
        name = _ts_name(fr.timestamp)
        rgb8 = np.clip(fr.rgb * 255.0, 0, 255).round().astype(np.uint8)
        Image.fromarray(rgb8).save(root / "rgb" / f"{name}.png")
        d16 = np.clip(fr.depth * depth_scale, 0, 65535).round().astype(np.uint16)
        Image.fromarray(d16).save(root / "depth" / f"{name}.png")
        rgb_rows.append(f"{name} rgb/{name}.png")
        depth_rows.append(f"{name} depth/{name}.png")
        if fr.seg is not None:
            Image.fromarray(fr.seg.astype(np.uint8)).save(root / "masks" / f"{name}.png")
        if fr.flow_to_next is not None:
            write_flow(root / "flows" / f"{name}.flo2", fr.flow_to_next)
        if fr.skeletons:
            write_skeletons(root / "skeletons" / f"{name}.json", fr.skeletons)
        for e in fr.entities:
            entities[e.label] = e

    (root / "rgb.txt").write_text(
        "# timestamp filename\n" + "\n".join(rgb_rows) + "\n"
    )
    (root / "depth.txt").write_text(
        "# timestamp filename\n" + "\n".join(depth_rows) + "\n"
    )
    (root / "calibration.txt").write_text(
        f"{K.fx} {K.fy} {K.cx} {K.cy} {K.width} {K.height} {depth_scale}\n"
    )
    if entities:
        (root / "entities.json").write_text(
            json.dumps(
                {str(k): {"kind": v.kind, "name": v.name} for k, v in entities.items()}
            )
        )
    if ground_truth is not None:
        ground_truth.write(root / "groundtruth.txt")


# ---------------------------------------------------------------------------
# sequence reader
# ---------------------------------------------------------------------------


def _read_listing(path: Path) -> list[tuple[float, str]]:
    rows = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        rows.append((float(parts[0]), parts[1]))
    return rows


def _associate(a: list[float], b: list[float], tol: float) -> list[tuple[int, int]]:
    """Greedy nearest-timestamp matching within a tolerance, best pairs first."""
    cands = []
    for i, ta in enumerate(a):
        for j, tb in enumerate(b):
            d = abs(ta - tb)
            if d <= tol:
                cands.append((d, i, j))
    cands.sort()
    used_a, used_b = set(), set()
    pairs = []
    for _, i, j in cands:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    pairs.sort()
    return pairs


def _load_calibration(root: Path, report: LoadReport):
    path = root / "calibration.txt"
    if path.exists():
        vals = [float(x) for x in path.read_text().split()]
        fx, fy, cx, cy, w, h, scale = vals
        return Intrinsics(fx, fy, cx, cy, int(w), int(h)), scale
    report.used_default_calibration = True
    fx, fy, cx, cy, w, h, scale = DEFAULT_CALIBRATION
    return Intrinsics(fx, fy, cx, cy, w, h), scale


def _sidecar_for(ts: float, directory: Path, suffix: str, tol: float) -> Path | None:
    if not directory.is_dir():
        return None
    exact = directory / f"{_ts_name(ts)}{suffix}"
    if exact.exists():
        return exact
    best, best_d = None, tol
    for p in directory.iterdir():
        try:
            d = abs(float(p.stem) - ts)
        except ValueError:
            continue
        if d <= best_d:
            best, best_d = p, d
    return best


def load_sequence(path, tolerance: float = PAIRING_TOLERANCE) -> Sequence:
    root = Path(path)
    report = LoadReport()
    K, depth_scale = _load_calibration(root, report)

    rgb_rows = _read_listing(root / "rgb.txt")
    depth_rows = _read_listing(root / "depth.txt")
    pairs = _associate([r[0] for r in rgb_rows], [r[0] for r in depth_rows], tolerance)
    report.matched = len(pairs)
    report.dropped_rgb = len(rgb_rows) - len(pairs)
    report.dropped_depth = len(depth_rows) - len(pairs)

    entities: tuple[EntityInfo, ...] = ()
    epath = root / "entities.json"
    if epath.exists():
        doc = json.loads(epath.read_text())
        entities = tuple(
            EntityInfo(int(k), v["kind"], v.get("name", "")) for k, v in doc.items()
        )

    frames: list[Frame] = []
    for i, j in pairs:
        ts, rgb_name = rgb_rows[i]
        _, depth_name = depth_rows[j]
        rgb = np.asarray(Image.open(root / rgb_name), dtype=np.float64) / 255.0
        d16 = np.asarray(Image.open(root / depth_name))
        depth = d16.astype(np.float64) / depth_scale

        seg = None
        mpath = _sidecar_for(ts, root / "masks", ".png", tolerance)
        if mpath is not None:
            seg = np.asarray(Image.open(mpath)).astype(np.int32)
        elif (root / "masks").is_dir():
            report.missing_sidecars += 1

        flow = None
        fpath = _sidecar_for(ts, root / "flows", ".flo2", tolerance)
        if fpath is not None:
            flow = read_flow(fpath)
            # never trust flow where depth is invalid
            bad = ~(depth > 0)
            flow.du[bad] = np.nan
            flow.dv[bad] = np.nan

        skeletons = {}
        spath = _sidecar_for(ts, root / "skeletons", ".json", tolerance)
        if spath is not None:
            skeletons = read_skeletons(spath)

        frame_entities = entities
        if seg is not None and not entities:
            labels = [int(x) for x in np.unique(seg) if x != BACKGROUND_LABEL]
            frame_entities = tuple(EntityInfo(x, "item") for x in labels)
        frames.append(
            Frame(ts, rgb, depth, seg, frame_entities, flow, skeletons)
        )

    gt = None
    gpath = root / "groundtruth.txt"
    if gpath.exists():
        gt = Trajectory.read(gpath)

    return Sequence(frames, K, depth_scale, gt, report)
