"""Motion clips, rotation math, forward kinematics, resampling and file I/O."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import ContractViolation

N_JOINTS = 24
FRAME_DIM = N_JOINTS * 3 + 3
CANONICAL_LEN = 60
DEFAULT_FPS = 24.0

SMPL_PARENTS = np.array(
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21]
)
JOINT_NAMES = (
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2", "l_ankle",
    "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar", "r_collar", "head",
    "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist", "l_hand", "r_hand",
)

# Parent-relative rest offsets of a neutral SMPL body, y up, metres (unscaled).
_RAW_OFFSETS = np.array(
    [
        [0.000, 0.000, 0.000],
        [0.058, -0.082, -0.018],
        [-0.060, -0.091, -0.014],
        [0.004, 0.124, -0.038],
        [0.043, -0.386, 0.008],
        [-0.043, -0.383, -0.005],
        [0.004, 0.138, 0.028],
        [-0.015, -0.427, -0.037],
        [0.019, -0.420, -0.035],
        [0.001, 0.056, 0.002],
        [0.041, -0.060, 0.122],
        [-0.035, -0.062, 0.130],
        [-0.014, 0.217, -0.034],
        [0.072, 0.124, -0.019],
        [-0.083, 0.122, -0.023],
        [0.011, 0.089, 0.052],
        [0.123, 0.045, -0.019],
        [-0.112, 0.047, -0.009],
        [0.255, -0.016, -0.023],
        [-0.260, -0.014, -0.031],
        [0.266, 0.009, -0.007],
        [-0.269, -0.007, -0.006],
        [0.087, -0.011, -0.016],
        [-0.089, -0.009, -0.010],
    ]
)
# joint span of a 1.7 m figure; the head joint sits ~10 cm below the crown
_REST_JOINT_SPAN = 1.6

_AXES = {"x": 0, "y": 1, "z": 2}


class MotionFormatError(ValueError):
    """Malformed motion file; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} at byte {offset}")
        self.offset = offset


class MotionSchemaError(ValueError):
    """Well-formed file whose arrays have the wrong shapes."""


def canonicalize_axis_angle(rot: np.ndarray) -> np.ndarray:
    """Wrap rotation angles into [0, 2*pi) keeping the axis."""
    angle = np.linalg.norm(rot, axis=-1, keepdims=True)
    wrapped = np.mod(angle, 2 * np.pi)
    scale = np.divide(wrapped, angle, out=np.ones_like(angle), where=angle >= 2 * np.pi)
    return rot * scale


@dataclass(eq=False)
class MotionClip:
    rotations: np.ndarray  # (L, 24, 3) axis-angle, radians
    root_translation: np.ndarray  # (L, 3) metres
    fps: float = DEFAULT_FPS
    label: int | None = None

    def __post_init__(self):
        rot = np.asarray(self.rotations, dtype=np.float64)
        root = np.asarray(self.root_translation, dtype=np.float64)
        if rot.ndim != 3 or rot.shape[1:] != (N_JOINTS, 3):
            raise MotionSchemaError(f"rotations must be (L, 24, 3), got {rot.shape}")
        if root.shape != (rot.shape[0], 3):
            raise MotionSchemaError(f"root_translation must be ({rot.shape[0]}, 3), got {root.shape}")
        if rot.shape[0] < 2:
            raise MotionSchemaError("a clip needs at least two frames")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(root))):
            raise MotionSchemaError("non-finite motion values")
        if not self.fps > 0:
            raise MotionSchemaError("fps must be positive")
        self.rotations = canonicalize_axis_angle(rot)
        self.root_translation = root
        self.fps = float(self.fps)

    @property
    def length(self) -> int:
        return self.rotations.shape[0]

    def frames(self) -> np.ndarray:
        """(L, 75) array: flattened joint rotations then root translation."""
        return np.concatenate([self.rotations.reshape(self.length, -1), self.root_translation], axis=1)

    @classmethod
    def from_frames(cls, frames: np.ndarray, fps: float = DEFAULT_FPS, label: int | None = None) -> MotionClip:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != FRAME_DIM:
            raise MotionSchemaError(f"frames must be (L, {FRAME_DIM}), got {frames.shape}")
        return cls(frames[:, :-3].reshape(-1, N_JOINTS, 3), frames[:, -3:], fps, label)

    def allclose(self, other: MotionClip, atol: float = 0.0) -> bool:
        return (
            self.length == other.length
            and self.fps == other.fps
            and self.label == other.label
            and np.allclose(self.rotations, other.rotations, rtol=0, atol=atol)
            and np.allclose(self.root_translation, other.root_translation, rtol=0, atol=atol)
        )


@dataclass(eq=False)
class SkeletonTemplate:
    parent: np.ndarray = field(default_factory=lambda: SMPL_PARENTS.copy())
    offset: np.ndarray = field(default_factory=lambda: default_offsets())
    foot_joints: tuple[int, ...] = (7, 8, 10, 11)  # l_ankle, r_ankle, l_foot, r_foot
    up_axis: str = "y"
    floor_height: float = 0.0

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=int)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        n = len(self.parent)
        if self.offset.shape != (n, 3) or not np.all(np.isfinite(self.offset)):
            raise ContractViolation("offset must be a finite (J, 3) array")
        if np.sum(self.parent == -1) != 1 or self.parent[0] != -1:
            raise ContractViolation("joint 0 must be the single root")
        for j in range(1, n):
            if not 0 <= self.parent[j] < j:
                raise ContractViolation("parents must precede children")
        if any(not 0 <= f < n for f in self.foot_joints):
            raise ContractViolation("foot joint index out of range")
        if self.up_axis not in _AXES:
            raise ContractViolation("up_axis must be x, y or z")

    @property
    def up(self) -> int:
        return _AXES[self.up_axis]

    @property
    def left_foot(self) -> tuple[int, ...]:
        return self.foot_joints[0::2]

    @property
    def right_foot(self) -> tuple[int, ...]:
        return self.foot_joints[1::2]

    def rest_pose(self) -> np.ndarray:
        pos = np.zeros_like(self.offset)
        for j in range(1, len(self.parent)):
            pos[j] = pos[self.parent[j]] + self.offset[j]
        return pos


def default_offsets() -> np.ndarray:
    rest = np.zeros_like(_RAW_OFFSETS)
    for j in range(1, N_JOINTS):
        rest[j] = rest[SMPL_PARENTS[j]] + _RAW_OFFSETS[j]
    span = rest[:, 1].max() - rest[:, 1].min()
    return _RAW_OFFSETS * (_REST_JOINT_SPAN / span)


def rodrigues(v: np.ndarray) -> np.ndarray:
    """Axis-angle vector(s) (..., 3) to rotation matrices (..., 3, 3)."""
    v = np.asarray(v, dtype=np.float64)
    theta2 = np.sum(v * v, axis=-1)[..., None, None]
    theta = np.sqrt(theta2)
    small = theta2 < 1e-12
    safe2 = np.where(small, 1.0, theta2)
    safe = np.where(small, 1.0, theta)
    # sin(t)/t and (1-cos(t))/t^2 with series fallbacks near zero
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / safe2)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    zero = np.zeros_like(x)
    K = np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a * K + b * (K @ K)


def forward_kinematics(clip: MotionClip, skel: SkeletonTemplate | None = None) -> np.ndarray:
    """World joint positions (L, J, 3)."""
    skel = skel or SkeletonTemplate()
    local = rodrigues(clip.rotations)
    L, J = clip.length, len(skel.parent)
    world_rot = np.empty((L, J, 3, 3))
    pos = np.empty((L, J, 3))
    world_rot[:, 0] = local[:, 0]
    pos[:, 0] = clip.root_translation
    for j in range(1, J):
        p = skel.parent[j]
        world_rot[:, j] = world_rot[:, p] @ local[:, j]
        pos[:, j] = pos[:, p] + world_rot[:, p] @ skel.offset[j]
    return pos


RESAMPLE_MODES = ("truncate", "uniform_extract", "interpolate")


def resample(clip: MotionClip, target_len: int = CANONICAL_LEN, mode: str = "interpolate") -> MotionClip:
    """Bring a clip to ``target_len`` frames.

    ``interpolate`` and ``uniform_extract`` keep the clip duration, so fps is
    rescaled; ``truncate`` keeps fps and drops the tail.
    """
    if mode not in RESAMPLE_MODES:
        raise ContractViolation(f"unknown resample mode {mode!r}")
    if target_len < 2:
        raise ContractViolation("target_len must be >= 2")
    L = clip.length
    if L == target_len:
        return replace(clip)
    if mode == "truncate":
        if L < target_len:
            raise ContractViolation(f"cannot truncate {L} frames to {target_len}; interpolate instead")
        return MotionClip(clip.rotations[:target_len], clip.root_translation[:target_len], clip.fps, clip.label)
    fps = clip.fps * (target_len - 1) / (L - 1)
    pos = np.arange(target_len) * (L - 1) / (target_len - 1)
    if mode == "uniform_extract":
        idx = extract_indices(L, target_len)
        return MotionClip(clip.rotations[idx], clip.root_translation[idx], fps, clip.label)
    lo = np.minimum(np.floor(pos).astype(int), L - 2)
    w = (pos - lo)
    frames = clip.frames()
    out = frames[lo] * (1.0 - w)[:, None] + frames[lo + 1] * w[:, None]
    return MotionClip.from_frames(out, fps, clip.label)


def extract_indices(length: int, target_len: int) -> np.ndarray:
    return np.floor(np.arange(target_len) * (length - 1) / (target_len - 1) + 0.5).astype(int)


# ------------------------------------------------------------------------ I/O

_MAGIC = b"MCLP"
_VERSION = 1
_HEADER = struct.Struct("<4sHIfi")


def save_motion(clip: MotionClip, path: str | Path) -> None:
    """Write a clip; ``.json`` suffix selects the text format, else binary."""
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(json.dumps(motion_to_json(clip)))
    else:
        path.write_bytes(motion_to_bytes(clip))


def load_motion(path: str | Path) -> MotionClip:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == _MAGIC:
        return motion_from_bytes(raw)
    try:
        obj = json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as err:
        raise MotionFormatError("not a motion file", err.start) from err
    except json.JSONDecodeError as err:
        raise MotionFormatError(f"invalid motion JSON: {err.msg}", err.pos) from err
    return motion_from_json(obj)


def motion_to_json(clip: MotionClip) -> dict:
    return {
        "fps": clip.fps,
        "label": clip.label,
        "rotations": clip.rotations.tolist(),
        "root": clip.root_translation.tolist(),
    }


def motion_from_json(obj: dict) -> MotionClip:
    if not isinstance(obj, dict):
        raise MotionSchemaError("motion JSON must be an object")
    missing = {"fps", "rotations", "root"} - set(obj)
    if missing:
        raise MotionSchemaError(f"motion JSON missing keys {sorted(missing)}")
    try:
        rot = np.array(obj["rotations"], dtype=np.float64)
        root = np.array(obj["root"], dtype=np.float64)
    except (ValueError, TypeError) as err:
        raise MotionSchemaError(f"ragged or non-numeric motion arrays: {err}") from err
    label = obj.get("label")
    return MotionClip(rot, root, float(obj["fps"]), None if label is None else int(label))


def motion_to_bytes(clip: MotionClip) -> bytes:
    label = -1 if clip.label is None else clip.label
    header = _HEADER.pack(_MAGIC, _VERSION, clip.length, clip.fps, label)
    payload = np.concatenate([clip.rotations.ravel(), clip.root_translation.ravel()])
    return header + payload.astype("<f8").tobytes()


def motion_from_bytes(raw: bytes) -> MotionClip:
    if len(raw) < _HEADER.size:
        raise MotionFormatError(f"truncated header: {len(raw)} of {_HEADER.size} bytes", len(raw))
    magic, version, L, fps, label = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise MotionFormatError("bad magic", 0)
    if version != _VERSION:
        raise MotionFormatError(f"unsupported version {version}", 4)
    n = L * FRAME_DIM * 8
    if len(raw) != _HEADER.size + n:
        raise MotionFormatError(
            f"payload is {len(raw) - _HEADER.size} bytes, expected {n}", min(len(raw), _HEADER.size + n)
        )
    payload = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    rot = payload[: L * N_JOINTS * 3].reshape(L, N_JOINTS, 3)
    root = payload[L * N_JOINTS * 3:].reshape(L, 3)
    return MotionClip(rot, root, float(fps), None if label == -1 else int(label))
