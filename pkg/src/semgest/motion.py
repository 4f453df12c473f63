"""Skeletal motion containers, BVH I/O, and flat per-frame feature matrices.

A motion clip is root translation plus per-joint rotations sampled at a fixed
fps.  Rotations live in one of two parameterizations:

* ``cont-6``  -- first two columns of the rotation matrix (6 values/joint),
  the default internal representation (frame row dim D = 3 + 6J);
* ``expmap-3`` -- axis-angle rotation vector with angle <= pi (D = 3 + 3J).

Everything here is immutable after construction and pure.
"""

from __future__ import annotations

import io
import re
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import (
    BvhParseError,
    PartitionError,
    TooShortError,
    UnsupportedFormatError,
)

ROTATION_PARAMS = ("cont-6", "expmap-3")
BODY, HAND = "body", "hand"

# joints whose names match any of these substrings are tagged as hand (fingers)
FINGER_NAME_PATTERNS = ("thumb", "index", "middle", "ring", "pinky", "finger")


def rot_dim(rotation: str) -> int:
    if rotation == "cont-6":
        return 6
    if rotation == "expmap-3":
        return 3
    raise ValueError(f"unknown rotation parameterization {rotation!r}")


def _frozen_array(x, dtype=np.float64) -> np.ndarray:
    a = np.array(x, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# rotation conversions


def matrices_to_cont6(mats: np.ndarray) -> np.ndarray:
    """(..., 3, 3) rotation matrices -> (..., 6): columns 0 and 1 stacked."""
    return np.concatenate([mats[..., :, 0], mats[..., :, 1]], axis=-1)


def cont6_to_matrices(vals: np.ndarray) -> np.ndarray:
    """Gram-Schmidt two stored columns back into orthonormal frames."""
    a1 = vals[..., 0:3]
    a2 = vals[..., 3:6]
    b1 = a1 / np.linalg.norm(a1, axis=-1, keepdims=True)
    a2p = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    b2 = a2p / np.linalg.norm(a2p, axis=-1, keepdims=True)
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrices_to_expmap(mats: np.ndarray) -> np.ndarray:
    flat = mats.reshape(-1, 3, 3)
    vecs = Rotation.from_matrix(flat).as_rotvec()
    return vecs.reshape(mats.shape[:-2] + (3,))


def expmap_to_matrices(vals: np.ndarray) -> np.ndarray:
    flat = vals.reshape(-1, 3)
    mats = Rotation.from_rotvec(flat).as_matrix()
    return mats.reshape(vals.shape[:-1] + (3, 3))


def matrices_to_param(mats: np.ndarray, rotation: str) -> np.ndarray:
    if rotation == "cont-6":
        return matrices_to_cont6(mats)
    return matrices_to_expmap(mats)


def param_to_matrices(vals: np.ndarray, rotation: str) -> np.ndarray:
    if rotation == "cont-6":
        return cont6_to_matrices(vals)
    return expmap_to_matrices(vals)


def identity_rotation(rotation: str) -> np.ndarray:
    """The encoding of the identity rotation in the given parameterization."""
    return matrices_to_param(np.eye(3)[None], rotation)[0]


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class Skeleton:
    """Joint hierarchy in topological order with a body/hand partition."""

    joint_names: tuple[str, ...]
    parents: tuple[int, ...]
    offsets: np.ndarray  # (J, 3) rest offsets, meters
    parts: tuple[str, ...]  # "body" | "hand" per joint

    def __post_init__(self):
        names, parents, parts = self.joint_names, self.parents, self.parts
        j = len(names)
        if not (len(parents) == j and len(parts) == j and self.offsets.shape == (j, 3)):
            raise ValueError("skeleton field lengths disagree")
        roots = [i for i, p in enumerate(parents) if p == -1]
        if roots != [0]:
            raise ValueError("skeleton must have exactly one root at index 0")
        for i, p in enumerate(parents[1:], start=1):
            if not 0 <= p < i:
                raise ValueError(f"joint {i} parent {p} breaks topological order")
        for tag in parts:
            if tag not in (BODY, HAND):
                raise ValueError(f"unknown part tag {tag!r}")
        object.__setattr__(self, "offsets", _frozen_array(self.offsets))

    @property
    def joint_count(self) -> int:
        return len(self.joint_names)

    def part_indices(self, part: str) -> list[int]:
        return [i for i, tag in enumerate(self.parts) if tag == part]

    def retagged(self, hand_joints: set[str]) -> "Skeleton":
        """Return a copy with the hand set replaced by the named joints."""
        unknown = hand_joints - set(self.joint_names)
        if unknown:
            raise ValueError(f"unknown joints: {sorted(unknown)}")
        parts = tuple(HAND if n in hand_joints else BODY for n in self.joint_names)
        return Skeleton(self.joint_names, self.parents, self.offsets, parts)


def tag_parts_by_name(joint_names) -> tuple[str, ...]:
    """Default partition: finger-like names are hand, all others body."""
    tags = []
    for name in joint_names:
        low = name.lower()
        hand = any(pat in low for pat in FINGER_NAME_PATTERNS)
        tags.append(HAND if hand else BODY)
    return tuple(tags)


@dataclass(frozen=True)
class MotionClip:
    """Root translation plus per-joint rotations at a fixed frame rate."""

    fps: float
    root_positions: np.ndarray  # (K, 3) meters
    joint_rotations: np.ndarray  # (K, J, rot_dim)
    rotation: str = "cont-6"

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        if self.rotation not in ROTATION_PARAMS:
            raise ValueError(f"unknown rotation parameterization {self.rotation!r}")
        pos = np.atleast_2d(np.asarray(self.root_positions, dtype=np.float64))
        rots = np.asarray(self.joint_rotations, dtype=np.float64)
        if rots.ndim != 3 or rots.shape[2] != rot_dim(self.rotation):
            raise ValueError(
                f"joint_rotations must be (K, J, {rot_dim(self.rotation)})"
            )
        if pos.shape != (rots.shape[0], 3):
            raise ValueError("root_positions must be (K, 3) matching rotations")
        if not (np.isfinite(pos).all() and np.isfinite(rots).all()):
            raise ValueError("non-finite values in motion clip")
        if self.rotation == "expmap-3":
            angles = np.linalg.norm(rots, axis=-1)
            if angles.max(initial=0.0) > np.pi + 1e-9:
                # canonicalize through rotation matrices
                rots = matrices_to_expmap(expmap_to_matrices(rots))
        object.__setattr__(self, "root_positions", _frozen_array(pos))
        object.__setattr__(self, "joint_rotations", _frozen_array(rots))

    @property
    def frame_count(self) -> int:
        return self.root_positions.shape[0]

    @property
    def joint_count(self) -> int:
        return self.joint_rotations.shape[1]

    @property
    def duration(self) -> float:
        return self.frame_count / self.fps


@dataclass(frozen=True)
class FrameMatrix:
    """K x D flat frame features: root xyz then joints in skeleton order."""

    data: np.ndarray  # (K, D)
    rotation: str = "cont-6"
    has_root: bool = True  # False for part matrices without the root columns

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError("frame matrix must be 2-D")
        object.__setattr__(self, "data", _frozen_array(a))

    @property
    def frame_count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def joint_count(self) -> int:
        root = 3 if self.has_root else 0
        return (self.dim - root) // rot_dim(self.rotation)


# ---------------------------------------------------------------------------
# flat matrix conversion


def to_frame_matrix(clip: MotionClip) -> FrameMatrix:
    """Flatten a clip to (K, 3 + rot_dim*J): root xyz, then joints in order."""
    k = clip.frame_count
    flat_rots = clip.joint_rotations.reshape(k, -1)
    data = np.concatenate([clip.root_positions, flat_rots], axis=1)
    return FrameMatrix(data, rotation=clip.rotation)


def from_frame_matrix(m: FrameMatrix, fps: float) -> MotionClip:
    """Inverse of :func:`to_frame_matrix`."""
    if not m.has_root:
        raise ValueError("cannot rebuild a clip from a rootless part matrix")
    rd = rot_dim(m.rotation)
    if (m.dim - 3) % rd != 0:
        raise ValueError(f"column count {m.dim} does not fit 3 + {rd}*J")
    rots = m.data[:, 3:].reshape(m.frame_count, -1, rd)
    return MotionClip(fps, m.data[:, :3], rots, rotation=m.rotation)


def part_column_indices(skel: Skeleton, rotation: str) -> tuple[list[int], list[int]]:
    """Column indices of (body, hand) in the full frame matrix layout.

    Root xyz columns belong to the body part.
    """
    rd = rot_dim(rotation)
    body_cols = [0, 1, 2]
    hand_cols: list[int] = []
    for j, tag in enumerate(skel.parts):
        cols = list(range(3 + j * rd, 3 + (j + 1) * rd))
        (body_cols if tag == BODY else hand_cols).extend(cols)
    return body_cols, hand_cols


def split_parts(m: FrameMatrix, skel: Skeleton) -> tuple[FrameMatrix, FrameMatrix]:
    """Split a full frame matrix into body (with root) and hand columns."""
    if skel.joint_count * rot_dim(m.rotation) + 3 != m.dim:
        raise ValueError("frame matrix does not match skeleton layout")
    if not skel.part_indices(BODY):
        raise PartitionError("partition has no body joints")
    body_cols, hand_cols = part_column_indices(skel, m.rotation)
    body = FrameMatrix(m.data[:, body_cols], rotation=m.rotation, has_root=True)
    hand = FrameMatrix(m.data[:, hand_cols], rotation=m.rotation, has_root=False)
    return body, hand


def join_parts(body: FrameMatrix, hand: FrameMatrix, skel: Skeleton) -> FrameMatrix:
    """Exact inverse of :func:`split_parts`."""
    if body.rotation != hand.rotation:
        raise ValueError("part matrices use different rotation parameterizations")
    body_cols, hand_cols = part_column_indices(skel, body.rotation)
    dim = len(body_cols) + len(hand_cols)
    if body.dim != len(body_cols) or hand.dim != len(hand_cols):
        raise ValueError("part matrix widths do not match skeleton partition")
    if body.frame_count != hand.frame_count:
        raise ValueError("part matrices have different frame counts")
    out = np.empty((body.frame_count, dim), dtype=np.float64)
    out[:, body_cols] = body.data
    out[:, hand_cols] = hand.data
    return FrameMatrix(out, rotation=body.rotation)


# ---------------------------------------------------------------------------
# finite differences


def time_derivative(arr: np.ndarray, fps: float) -> np.ndarray:
    """Central differences scaled by fps; one-sided first-order at the ends."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape[0] < 3:
        raise TooShortError("need at least 3 frames for derivatives")
    out = np.empty_like(arr)
    out[1:-1] = (arr[2:] - arr[:-2]) * (fps / 2.0)
    out[0] = (arr[1] - arr[0]) * fps
    out[-1] = (arr[-1] - arr[-2]) * fps
    return out


def derivatives(m: FrameMatrix, fps: float) -> tuple[FrameMatrix, FrameMatrix]:
    """Velocity and acceleration frame matrices (same row count as input)."""
    vel = time_derivative(m.data, fps)
    acc = time_derivative(vel, fps)
    mk = lambda a: FrameMatrix(a, rotation=m.rotation, has_root=m.has_root)
    return mk(vel), mk(acc)


# ---------------------------------------------------------------------------
# binary matrix format: 8-byte header (u32 K, u32 D, little-endian),
# then K*D float32 little-endian, row-major


def write_matrix(path, arr: np.ndarray) -> None:
    a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
    if a.ndim != 2:
        raise ValueError("only 2-D matrices are serializable")
    with open(path, "wb") as f:
        f.write(struct.pack("<II", a.shape[0], a.shape[1]))
        f.write(a.tobytes())


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(8)
        if len(header) != 8:
            raise UnsupportedFormatError(f"{path}: truncated matrix header")
        k, d = struct.unpack("<II", header)
        payload = f.read(4 * k * d)
    if len(payload) != 4 * k * d:
        raise UnsupportedFormatError(f"{path}: truncated matrix payload")
    return np.frombuffer(payload, dtype="<f4").reshape(k, d).astype(np.float64)


# ---------------------------------------------------------------------------
# BVH parsing

_POSITION_CHANNELS = {"Xposition", "Yposition", "Zposition"}
_ROTATION_CHANNELS = {"Xrotation", "Yrotation", "Zrotation"}


@dataclass
class _Node:
    name: str
    parent: int
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    channels: list[str] = field(default_factory=list)


class _Lines:
    def __init__(self, text: str):
        self.lines = text.splitlines()
        self.pos = 0

    @property
    def line_no(self) -> int:
        return self.pos  # 1-based number of the line just consumed

    def next(self) -> str:
        while self.pos < len(self.lines):
            line = self.lines[self.pos].strip()
            self.pos += 1
            if line:
                return line
        raise BvhParseError("unexpected end of file", len(self.lines))

    def peek(self) -> str | None:
        save = self.pos
        try:
            line = self.next()
        except BvhParseError:
            return None
        self.pos = save
        return line


def _parse_offset(line: str, ln: int) -> np.ndarray:
    parts = line.split()
    if len(parts) != 4:
        raise BvhParseError(f"bad OFFSET: {line!r}", ln)
    return np.array([float(v) for v in parts[1:]])


def _expect(lines: _Lines, token: str):
    line = lines.next()
    if line != token:
        raise BvhParseError(f"expected {token!r}, got {line!r}", lines.line_no)


def _parse_joint_block(lines: _Lines, name: str, parent: int, nodes: list[_Node]):
    _expect(lines, "{")
    node = _Node(name=name, parent=parent)
    index = len(nodes)
    nodes.append(node)
    while True:
        line = lines.next()
        if line.startswith("OFFSET"):
            node.offset = _parse_offset(line, lines.line_no)
        elif line.startswith("CHANNELS"):
            parts = line.split()
            try:
                n = int(parts[1])
            except (IndexError, ValueError):
                raise BvhParseError(f"bad CHANNELS: {line!r}", lines.line_no)
            if len(parts) != 2 + n:
                raise BvhParseError(f"CHANNELS count mismatch: {line!r}", lines.line_no)
            node.channels = parts[2:]
        elif line.startswith("JOINT"):
            child = line.split(None, 1)[1].strip()
            _parse_joint_block(lines, child, index, nodes)
        elif line.startswith("End Site") or line.startswith("End site"):
            _expect(lines, "{")
            inner = lines.next()
            if not inner.startswith("OFFSET"):
                raise BvhParseError("End Site must contain OFFSET", lines.line_no)
            _expect(lines, "}")
        elif line == "}":
            return
        else:
            raise BvhParseError(f"unexpected token {line!r}", lines.line_no)


def _check_channels(node: _Node) -> tuple[str, list[int], list[int]]:
    """Validate channel set; return (euler order, position slots, rotation slots)."""
    pos_slots = [i for i, c in enumerate(node.channels) if c in _POSITION_CHANNELS]
    rot_slots = [i for i, c in enumerate(node.channels) if c in _ROTATION_CHANNELS]
    if len(pos_slots) + len(rot_slots) != len(node.channels):
        bad = [c for c in node.channels if c not in _POSITION_CHANNELS | _ROTATION_CHANNELS]
        raise UnsupportedFormatError(f"joint {node.name}: unknown channels {bad}")
    if len(rot_slots) != 3 or len(pos_slots) not in (0, 3):
        raise UnsupportedFormatError(
            f"joint {node.name}: unsupported channel set {node.channels}"
        )
    order = "".join(node.channels[i][0] for i in rot_slots)  # e.g. "ZXY"
    return order, pos_slots, rot_slots


def parse_bvh(text: str, rotation: str = "cont-6") -> tuple[Skeleton, MotionClip]:
    """Parse BVH text into a skeleton and motion clip.

    Euler channels (degrees) are converted to the requested rotation
    parameterization; fps = 1 / FrameTime.  Joints need 3 rotation channels,
    optionally plus 3 position channels; non-root positions are ignored.
    The body/hand partition is tagged from joint names (finger heuristics);
    use :meth:`Skeleton.retagged` to override.
    """
    if rotation not in ROTATION_PARAMS:
        raise ValueError(f"unknown rotation parameterization {rotation!r}")
    lines = _Lines(text)
    if lines.next() != "HIERARCHY":
        raise BvhParseError("file must start with HIERARCHY", lines.line_no)
    root_line = lines.next()
    if not root_line.startswith("ROOT"):
        raise BvhParseError(f"expected ROOT, got {root_line!r}", lines.line_no)
    nodes: list[_Node] = []
    _parse_joint_block(lines, root_line.split(None, 1)[1].strip(), -1, nodes)

    if lines.next() != "MOTION":
        raise BvhParseError("expected MOTION section", lines.line_no)
    frames_line = lines.next()
    m = re.match(r"Frames:\s*(\d+)$", frames_line)
    if not m:
        raise BvhParseError(f"bad Frames header: {frames_line!r}", lines.line_no)
    frame_count = int(m.group(1))
    ft_line = lines.next()
    m = re.match(r"Frame Time:\s*([0-9.eE+-]+)$", ft_line)
    if not m:
        raise BvhParseError(f"bad Frame Time header: {ft_line!r}", lines.line_no)
    frame_time = float(m.group(1))
    if frame_time <= 0:
        raise BvhParseError("Frame Time must be positive", lines.line_no)

    specs = [_check_channels(n) for n in nodes]
    total_channels = sum(len(n.channels) for n in nodes)

    values: list[float] = []
    needed = frame_count * total_channels
    while len(values) < needed:
        line = lines.peek()
        if line is None:
            raise BvhParseError(
                f"motion data ends early: {len(values)}/{needed} values",
                len(lines.lines),
            )
        lines.next()
        try:
            values.extend(float(v) for v in line.split())
        except ValueError:
            raise BvhParseError(f"bad motion value in {line!r}", lines.line_no)
    data = np.asarray(values[:needed], dtype=np.float64).reshape(frame_count, total_channels)

    root_pos = np.zeros((frame_count, 3))
    rot_mats = np.empty((frame_count, len(nodes), 3, 3))
    col = 0
    for j, (node, (order, pos_slots, rot_slots)) in enumerate(zip(nodes, specs)):
        block = data[:, col : col + len(node.channels)]
        col += len(node.channels)
        if pos_slots and j == 0:
            # map slots back to x, y, z order
            for slot in pos_slots:
                axis = "XYZ".index(node.channels[slot][0])
                root_pos[:, axis] = block[:, slot]
        angles = block[:, rot_slots]
        rot_mats[:, j] = Rotation.from_euler(order, angles, degrees=True).as_matrix()

    skel = Skeleton(
        joint_names=tuple(n.name for n in nodes),
        parents=tuple(n.parent for n in nodes),
        offsets=np.stack([n.offset for n in nodes]),
        parts=tag_parts_by_name([n.name for n in nodes]),
    )
    clip = MotionClip(
        fps=1.0 / frame_time,
        root_positions=root_pos,
        joint_rotations=matrices_to_param(rot_mats, rotation),
        rotation=rotation,
    )
    return skel, clip


def write_bvh(skel: Skeleton, clip: MotionClip) -> str:
    """Serialize to BVH text (root: 6 channels, joints: ZXY rotation, degrees)."""
    if clip.joint_count != skel.joint_count:
        raise ValueError("clip joint count does not match skeleton")
    children: list[list[int]] = [[] for _ in skel.joint_names]
    for i, p in enumerate(skel.parents):
        if p >= 0:
            children[p].append(i)

    out = io.StringIO()
    out.write("HIERARCHY\n")

    def emit(j: int, depth: int):
        pad = "  " * depth
        kind = "ROOT" if skel.parents[j] == -1 else "JOINT"
        out.write(f"{pad}{kind} {skel.joint_names[j]}\n{pad}{{\n")
        ox, oy, oz = skel.offsets[j]
        out.write(f"{pad}  OFFSET {ox:.6f} {oy:.6f} {oz:.6f}\n")
        if kind == "ROOT":
            out.write(
                f"{pad}  CHANNELS 6 Xposition Yposition Zposition"
                " Zrotation Xrotation Yrotation\n"
            )
        else:
            out.write(f"{pad}  CHANNELS 3 Zrotation Xrotation Yrotation\n")
        if children[j]:
            for c in children[j]:
                emit(c, depth + 1)
        else:
            out.write(f"{pad}  End Site\n{pad}  {{\n")
            out.write(f"{pad}    OFFSET 0.000000 0.000000 0.000000\n")
            out.write(f"{pad}  }}\n")
        out.write(f"{pad}}}\n")

    emit(0, 0)

    mats = param_to_matrices(clip.joint_rotations, clip.rotation)
    k, j = clip.frame_count, clip.joint_count
    eulers = Rotation.from_matrix(mats.reshape(-1, 3, 3)).as_euler("ZXY", degrees=True)
    eulers = eulers.reshape(k, j, 3)

    out.write("MOTION\n")
    out.write(f"Frames: {k}\n")
    out.write(f"Frame Time: {1.0 / clip.fps:.8f}\n")
    for f in range(k):
        row = list(clip.root_positions[f]) + list(eulers[f].ravel())
        out.write(" ".join(f"{v:.6f}" for v in row) + "\n")
    return out.getvalue()
