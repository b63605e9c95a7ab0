"""Skeleton data model: topologies, joint/bone streams and their preprocessing.

Coordinates are 2-D with the y axis pointing up. Every topology is a spanning
tree so that bones (child minus parent) and joints are mutually invertible.
"""

from __future__ import annotations

import json
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DegeneratePoseError, InsufficientFramesError, InvalidInputError


@dataclass(frozen=True)
class SkeletonTopology:
    """A named skeleton whose ``edges`` are (parent, child) pairs of a tree."""

    name: str
    num_joints: int
    edges: tuple[tuple[int, int], ...]
    root: int
    joint_names: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        k = self.num_joints
        if k < 1:
            raise InvalidInputError(f"{self.name}: need at least one joint")
        if len(self.edges) != k - 1:
            raise InvalidInputError(
                f"{self.name}: a tree over {k} joints needs {k - 1} edges, got {len(self.edges)}"
            )
        for p, c in self.edges:
            if not (0 <= p < k and 0 <= c < k) or p == c:
                raise InvalidInputError(f"{self.name}: bad edge ({p}, {c})")
        if not 0 <= self.root < k:
            raise InvalidInputError(f"{self.name}: root {self.root} out of range")
        children = [c for _, c in self.edges]
        if len(set(children)) != len(children) or self.root in children:
            raise InvalidInputError(f"{self.name}: every non-root joint needs exactly one parent")
        # k-1 edges, unique parents and full reachability <=> spanning tree
        if len(self._traversal()) != k - 1:
            raise InvalidInputError(f"{self.name}: edges do not reach every joint from the root")

    @property
    def num_bones(self) -> int:
        return len(self.edges)

    def _traversal(self) -> list[int]:
        by_parent: dict[int, list[int]] = {}
        for e, (p, _) in enumerate(self.edges):
            by_parent.setdefault(p, []).append(e)
        order, queue, seen = [], deque([self.root]), {self.root}
        while queue:
            j = queue.popleft()
            for e in by_parent.get(j, ()):
                c = self.edges[e][1]
                if c in seen:
                    continue
                seen.add(c)
                order.append(e)
                queue.append(c)
        return order

    def edge_order(self) -> list[int]:
        """Edge indices in breadth-first order from the root (parents before children)."""
        return self._traversal()

    def parents(self) -> np.ndarray:
        return np.array([p for p, _ in self.edges], dtype=np.int64)

    def children(self) -> np.ndarray:
        return np.array([c for _, c in self.edges], dtype=np.int64)


SYNTH13 = SkeletonTopology(
    name="synth13",
    num_joints=13,
    # rooted at the pelvis
    edges=(
        (8, 1), (1, 0),
        (1, 2), (2, 4), (4, 6),
        (1, 3), (3, 5), (5, 7),
        (8, 9), (9, 11),
        (8, 10), (10, 12),
    ),
    root=8,
    joint_names=(
        "head", "neck", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
        "l_wrist", "r_wrist", "pelvis", "l_knee", "r_knee", "l_ankle", "r_ankle",
    ),
)

# COCO links with the shoulder-shoulder, eye-eye and right ear-shoulder links pruned.
COCO17 = SkeletonTopology(
    name="coco17",
    num_joints=17,
    edges=(
        (11, 12), (11, 13), (13, 15), (12, 14), (14, 16),
        (11, 5), (12, 6), (5, 7), (7, 9), (6, 8), (8, 10),
        (5, 3), (3, 1), (1, 0), (0, 2), (2, 4),
    ),
    root=11,
    joint_names=(
        "nose", "l_eye", "r_eye", "l_ear", "r_ear", "l_shoulder", "r_shoulder",
        "l_elbow", "r_elbow", "l_wrist", "r_wrist", "l_hip", "r_hip",
        "l_knee", "r_knee", "l_ankle", "r_ankle",
    ),
)

# OpenPose limbs without the two ear-shoulder links.
OPENPOSE18 = SkeletonTopology(
    name="openpose18",
    num_joints=18,
    edges=(
        (1, 2), (2, 3), (3, 4), (1, 5), (5, 6), (6, 7),
        (1, 8), (8, 9), (9, 10), (1, 11), (11, 12), (12, 13),
        (1, 0), (0, 14), (14, 16), (0, 15), (15, 17),
    ),
    root=1,
    joint_names=(
        "nose", "neck", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder",
        "l_elbow", "l_wrist", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee",
        "l_ankle", "r_eye", "l_eye", "r_ear", "l_ear",
    ),
)

TOPOLOGIES = {t.name: t for t in (SYNTH13, COCO17, OPENPOSE18)}


def get_topology(name: str) -> SkeletonTopology:
    try:
        return TOPOLOGIES[name]
    except KeyError:
        raise InvalidInputError(f"unknown topology {name!r}; known: {sorted(TOPOLOGIES)}") from None


def _check_stream(data, n_nodes: int, what: str) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise InvalidInputError(f"{what} must be [t, K, 2], got shape {arr.shape}")
    if arr.shape[1] != n_nodes:
        raise InvalidInputError(f"{what} has {arr.shape[1]} nodes, topology expects {n_nodes}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{what} contains non-finite values")
    return arr


@dataclass(frozen=True)
class JointSequence:
    data: np.ndarray
    topology: SkeletonTopology

    def __post_init__(self):
        object.__setattr__(self, "data", _check_stream(self.data, self.topology.num_joints, "joints"))

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    def roots(self) -> np.ndarray:
        return self.data[:, self.topology.root].copy()


@dataclass(frozen=True)
class BoneSequence:
    data: np.ndarray
    topology: SkeletonTopology

    def __post_init__(self):
        object.__setattr__(self, "data", _check_stream(self.data, self.topology.num_bones, "bones"))

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]


def joints_to_bones(joints: JointSequence) -> BoneSequence:
    """Bone vectors as child-minus-parent coordinate differences per frame."""
    if not isinstance(joints, JointSequence):
        raise InvalidInputError("joints_to_bones expects a JointSequence")
    topo = joints.topology
    j = joints.data
    return BoneSequence(j[:, topo.children()] - j[:, topo.parents()], topo)


def bones_to_joints(bones: BoneSequence, root_positions) -> JointSequence:
    """Rebuild joints by summing bone vectors outward from the root."""
    topo = bones.topology
    roots = np.asarray(root_positions, dtype=np.float64)
    if roots.shape != (bones.num_frames, 2):
        raise InvalidInputError(
            f"need one 2-D root position per frame, got shape {roots.shape} for t={bones.num_frames}"
        )
    out = np.zeros((bones.num_frames, topo.num_joints, 2))
    out[:, topo.root] = roots
    for e in topo.edge_order():
        p, c = topo.edges[e]
        out[:, c] = out[:, p] + bones.data[:, e]
    return JointSequence(out, topo)


def normalize_skeleton(joints: JointSequence) -> JointSequence:
    """Per frame: move the bounding-box center to the origin and scale the height to 2."""
    j = joints.data
    lo = j.min(axis=1, keepdims=True)
    hi = j.max(axis=1, keepdims=True)
    height = (hi - lo)[..., 1:2]
    bad = np.flatnonzero(height.reshape(-1) <= 0)
    if bad.size:
        raise DegeneratePoseError(f"zero vertical extent in frame(s) {bad.tolist()}")
    center = (lo + hi) / 2.0
    return JointSequence((j - center) * (2.0 / height), joints.topology)


def select_frame_indices(t: int, n: int, mode: str = "center") -> np.ndarray:
    if t < 1 or n < 1:
        raise InvalidInputError(f"need t >= 1 and n >= 1, got t={t}, n={n}")
    if mode == "center":
        if t < n:
            raise InsufficientFramesError(f"center crop of {n} frames needs t >= {n}, got {t}")
        start = (t - n) // 2
        return np.arange(start, start + n)
    if mode == "repeat":
        return np.arange(n) % t
    raise InvalidInputError(f"unknown frame selection mode {mode!r}")


def select_frames(joints: JointSequence, n: int, mode: str = "center") -> JointSequence:
    """Crop ``n`` central frames, or cycle frames until the sequence has length ``n``."""
    idx = select_frame_indices(joints.num_frames, n, mode)
    return JointSequence(joints.data[idx], joints.topology)


def inject_jitter(
    joints: JointSequence,
    frame_rate: float,
    magnitude: float,
    seed,
    joint_fraction: float = 0.3,
) -> tuple[JointSequence, np.ndarray]:
    """Displace random joints in a random subset of frames by uniform noise.

    Returns the corrupted sequence and a boolean ``[t, K]`` mask of the
    displaced (frame, joint) pairs.
    """
    if not 0.0 <= frame_rate <= 1.0:
        raise InvalidInputError(f"frame_rate must lie in [0, 1], got {frame_rate}")
    if magnitude < 0:
        raise InvalidInputError(f"magnitude must be >= 0, got {magnitude}")
    rng = np.random.default_rng(seed)
    t, k = joints.data.shape[:2]
    n_frames = int(np.floor(frame_rate * t + 0.5))
    mask = np.zeros((t, k), dtype=bool)
    out = joints.data.copy()
    for f in np.sort(rng.choice(t, size=n_frames, replace=False)):
        chosen = rng.random(k) < joint_fraction
        if not chosen.any():
            chosen[rng.integers(k)] = True
        mask[f] = chosen
        out[f, chosen] += rng.uniform(-magnitude, magnitude, size=(int(chosen.sum()), 2))
    return JointSequence(out, joints.topology), mask


def _smooth(joints: JointSequence, kernel: np.ndarray) -> JointSequence:
    smoothed = correlate1d(joints.data, kernel, axis=0, mode="nearest")
    return JointSequence(smoothed, joints.topology)


def _check_window(window: int):
    if window < 1 or window % 2 == 0:
        raise InvalidInputError(f"smoothing window must be odd and >= 1, got {window}")


def smooth_average(joints: JointSequence, window: int = 3) -> JointSequence:
    _check_window(window)
    return _smooth(joints, np.full(window, 1.0 / window))


def gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    _check_window(window)
    if sigma <= 0:
        raise InvalidInputError(f"sigma must be > 0, got {sigma}")
    x = np.arange(window) - window // 2
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def smooth_gaussian(joints: JointSequence, window: int = 3, sigma: float = 1.0) -> JointSequence:
    return _smooth(joints, gaussian_kernel(window, sigma))


# --- archives -----------------------------------------------------------------
#
# Binary layout (little endian):
#   magic   4s   b"GSKL"
#   version u16  1
#   kind    u8   0 = joints, 1 = bones
#   namelen u8   length of the topology name
#   name    namelen bytes, ascii
#   t, K, D u32 x3 (D is always 2)
#   payload t*K*D float32, row-major [frame][node][coord]

SKELETON_MAGIC = b"GSKL"
_KINDS = {0: "joints", 1: "bones"}


def _kind_of(seq) -> int:
    if isinstance(seq, JointSequence):
        return 0
    if isinstance(seq, BoneSequence):
        return 1
    raise InvalidInputError(f"cannot archive object of type {type(seq).__name__}")


def encode_skeleton_archive(seq: JointSequence | BoneSequence) -> bytes:
    name = seq.topology.name.encode("ascii")
    t, k, d = seq.data.shape
    header = SKELETON_MAGIC + struct.pack("<HBB", 1, _kind_of(seq), len(name)) + name
    header += struct.pack("<III", t, k, d)
    return header + seq.data.astype("<f4").tobytes(order="C")


def decode_skeleton_archive(blob: bytes) -> JointSequence | BoneSequence:
    if blob[:4] != SKELETON_MAGIC:
        raise InvalidInputError("not a skeleton archive (bad magic)")
    version, kind, namelen = struct.unpack_from("<HBB", blob, 4)
    if version != 1 or kind not in _KINDS:
        raise InvalidInputError(f"unsupported skeleton archive version={version} kind={kind}")
    off = 8
    topo = get_topology(blob[off:off + namelen].decode("ascii"))
    off += namelen
    t, k, d = struct.unpack_from("<III", blob, off)
    off += 12
    expected = t * k * d * 4
    if len(blob) - off != expected:
        raise InvalidInputError(f"payload holds {len(blob) - off} bytes, header implies {expected}")
    data = np.frombuffer(blob, dtype="<f4", offset=off).reshape(t, k, d).astype(np.float64)
    return JointSequence(data, topo) if kind == 0 else BoneSequence(data, topo)


def write_skeleton_archive(path, seq: JointSequence | BoneSequence) -> Path:
    path = Path(path)
    path.write_bytes(encode_skeleton_archive(seq))
    return path


def read_skeleton_archive(path) -> JointSequence | BoneSequence:
    return decode_skeleton_archive(Path(path).read_bytes())


def write_skeleton_jsonl(path, seq: JointSequence | BoneSequence) -> Path:
    """Human-readable alternative: a header line, then one line per frame."""
    path = Path(path)
    t, k, _ = seq.data.shape
    lines = [json.dumps({"format": "gskl-jsonl", "kind": _KINDS[_kind_of(seq)],
                         "topology": seq.topology.name, "t": t, "num_nodes": k})]
    for f in range(t):
        lines.append(json.dumps({"frame": f, "coords": seq.data[f].tolist()}))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_skeleton_jsonl(path) -> JointSequence | BoneSequence:
    with open(path) as fh:
        header = json.loads(fh.readline())
        frames = [json.loads(line)["coords"] for line in fh if line.strip()]
    if header.get("format") != "gskl-jsonl":
        raise InvalidInputError(f"{path}: not a skeleton JSON-lines file")
    topo = get_topology(header["topology"])
    data = np.asarray(frames, dtype=np.float64).reshape(header["t"], header["num_nodes"], 2)
    return JointSequence(data, topo) if header["kind"] == "joints" else BoneSequence(data, topo)
