"""Procedural walking sequences: sinusoidal stick-figure gait rendered to 64x44 masks.

Identity lives in limb proportions, cadence, swing amplitudes, lean and body
width. Conditions (``clean``, ``carried-blob``, ``widened-contour``) change
only the rendered silhouette, never the joints.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .skeleton import (
    SYNTH13,
    JointSequence,
    SkeletonTopology,
    normalize_skeleton,
    write_skeleton_archive,
)

HEIGHT, WIDTH = 64, 44
CANVAS_MARGIN = 4
CONDITIONS = ("clean", "carried-blob", "widened-contour")

# synth13 edge order: torso, neck-head, l_shoulder, l_upper_arm, l_forearm,
# r_shoulder, r_upper_arm, r_forearm, l_thigh, l_shin, r_thigh, r_shin
_BASE_LENGTHS = np.array([0.30, 0.12, 0.08, 0.17, 0.15, 0.08, 0.17, 0.15, 0.25, 0.25, 0.25, 0.25])
_BASE_WIDTHS = np.array([3.2, 2.8, 1.8, 1.5, 1.2, 1.8, 1.5, 1.2, 2.2, 1.6, 2.2, 1.6])
# limb groups share one random scale so left and right stay symmetric
_LIMB_GROUPS = np.array([0, 1, 2, 3, 4, 2, 3, 4, 5, 6, 5, 6])
_TORSO, _HEAD = 0, 1
_WIDENED_EDGES = np.array([0, 2, 3, 5, 6, 8, 10])


@dataclass(frozen=True)
class IdentityParams:
    limb_lengths: np.ndarray
    frequency: float
    stride_amplitude: float
    arm_amplitude: float
    lean: float
    phase: float
    widths: np.ndarray
    knee_amplitude: float = 0.6

    def __post_init__(self):
        lengths = np.asarray(self.limb_lengths, dtype=np.float64)
        widths = np.asarray(self.widths, dtype=np.float64)
        object.__setattr__(self, "limb_lengths", lengths)
        object.__setattr__(self, "widths", widths)
        if lengths.shape != (SYNTH13.num_bones,) or np.any(lengths <= 0):
            raise InvalidInputError("limb_lengths must be 12 positive values (one per synth13 edge)")
        if widths.shape != (SYNTH13.num_bones,) or np.any(widths < 0):
            raise InvalidInputError("widths must be 12 non-negative values")
        if not 0.0 < self.frequency < 0.5:
            raise InvalidInputError(f"frequency must lie in (0, 0.5), got {self.frequency}")
        for name in ("stride_amplitude", "arm_amplitude", "knee_amplitude"):
            a = getattr(self, name)
            if not 0.0 <= a < np.pi / 2:
                raise InvalidInputError(f"{name} must lie in [0, pi/2), got {a}")

    def to_dict(self) -> dict:
        return {
            "limb_lengths": self.limb_lengths.tolist(),
            "frequency": self.frequency,
            "stride_amplitude": self.stride_amplitude,
            "arm_amplitude": self.arm_amplitude,
            "knee_amplitude": self.knee_amplitude,
            "lean": self.lean,
            "phase": self.phase,
            "widths": self.widths.tolist(),
        }


@dataclass(frozen=True)
class GaitSample:
    label: int
    condition: str
    view: str
    silhouettes: np.ndarray
    joints: JointSequence
    seq: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        s = self.silhouettes
        if s.ndim != 3 or s.shape[1:] != (HEIGHT, WIDTH):
            raise InvalidInputError(f"silhouettes must be [t, {HEIGHT}, {WIDTH}], got {s.shape}")
        if s.shape[0] != self.joints.num_frames:
            raise InvalidInputError(
                f"{s.shape[0]} silhouette frames but {self.joints.num_frames} skeleton frames"
            )

    @property
    def num_frames(self) -> int:
        return self.silhouettes.shape[0]


def view_scale(view: str) -> float:
    """Horizontal foreshortening for a view tag such as ``"090"`` (degrees, 0..180).

    Not a camera model: the side-view figure is squashed by ``sin(angle)`` and
    mirrored past 90 degrees, which is enough to make views differ.
    """
    try:
        angle = float(view)
    except (TypeError, ValueError):
        raise InvalidInputError(f"view tag must be an angle in degrees, got {view!r}") from None
    if not 0.0 <= angle <= 180.0:
        raise InvalidInputError(f"view angle must lie in [0, 180], got {view!r}")
    mag = max(np.sin(np.radians(angle)), 0.25)
    return mag if angle <= 90.0 else -mag


def sample_identity(rng: np.random.Generator) -> IdentityParams:
    group_scale = 1.0 + 0.06 * rng.standard_normal(_LIMB_GROUPS.max() + 1)
    lengths = _BASE_LENGTHS * np.clip(group_scale, 0.7, 1.3)[_LIMB_GROUPS]
    width_scale = 1.0 + 0.06 * rng.standard_normal(_LIMB_GROUPS.max() + 1)
    widths = _BASE_WIDTHS * np.clip(width_scale, 0.6, 1.4)[_LIMB_GROUPS]
    return IdentityParams(
        limb_lengths=lengths,
        frequency=float(rng.uniform(1 / 20, 1 / 12)),
        stride_amplitude=float(rng.uniform(0.25, 0.55)),
        arm_amplitude=float(rng.uniform(0.15, 0.55)),
        knee_amplitude=float(rng.uniform(0.35, 0.8)),
        lean=float(rng.uniform(0.0, 0.15)),
        phase=float(rng.uniform(0, 2 * np.pi)),
        widths=widths,
    )


def perturb_identity(params: IdentityParams, rng: np.random.Generator) -> IdentityParams:
    """Sequence-to-sequence variation of one walker: new phase, slightly varied cadence."""
    return IdentityParams(
        limb_lengths=params.limb_lengths,
        frequency=float(np.clip(params.frequency * (1 + 0.03 * rng.standard_normal()), 0.01, 0.49)),
        stride_amplitude=float(np.clip(params.stride_amplitude * (1 + 0.05 * rng.standard_normal()), 0, 1.5)),
        arm_amplitude=float(np.clip(params.arm_amplitude * (1 + 0.05 * rng.standard_normal()), 0, 1.5)),
        knee_amplitude=float(np.clip(params.knee_amplitude * (1 + 0.05 * rng.standard_normal()), 0, 1.5)),
        lean=params.lean + 0.01 * float(rng.standard_normal()),
        phase=float(rng.uniform(0, 2 * np.pi)),
        widths=params.widths,
    )


def _limb(angle):
    # angle measured from straight down, positive towards +x (walking direction)
    return np.stack([np.sin(angle), -np.cos(angle)], axis=-1)


def walk_joints(params: IdentityParams, frames) -> np.ndarray:
    """Raw (un-normalized) synth13 joint positions at the given (possibly fractional) frames."""
    frames = np.asarray(frames, dtype=np.float64)
    L = params.limb_lengths
    phi = 2 * np.pi * params.frequency * frames + params.phase
    out = np.zeros(frames.shape + (SYNTH13.num_joints, 2))

    pelvis = np.zeros(frames.shape + (2,))
    pelvis[..., 1] = 0.01 * np.cos(2 * phi)
    up = _limb(np.pi + params.lean) * np.ones_like(pelvis)
    neck = pelvis + L[0] * up
    head = neck + L[1] * up
    out[..., 8, :] = pelvis
    out[..., 1, :] = neck
    out[..., 0, :] = head

    for side, (sh, el, wr, kn, an, e_sh, e_ua, e_fa, e_th, e_sn) in enumerate(
        [(2, 4, 6, 9, 11, 2, 3, 4, 8, 9), (3, 5, 7, 10, 12, 5, 6, 7, 10, 11)]
    ):
        leg_phi = phi + side * np.pi
        thigh = params.stride_amplitude * np.sin(leg_phi)
        flex = params.knee_amplitude * 0.5 * (1 + np.sin(leg_phi + np.pi / 2 + 0.5))
        knee = pelvis + L[e_th] * _limb(thigh)
        out[..., kn, :] = knee
        out[..., an, :] = knee + L[e_sn] * _limb(thigh - flex)

        offset = np.array([0.35 if side == 0 else -0.35, -0.94])
        shoulder = neck + L[e_sh] * offset
        upper = -params.arm_amplitude * np.sin(leg_phi)
        fore = upper + 0.5 * params.arm_amplitude * 0.5 * (1 + np.sin(leg_phi))
        elbow = shoulder + L[e_ua] * _limb(upper)
        out[..., sh, :] = shoulder
        out[..., el, :] = elbow
        out[..., wr, :] = elbow + L[e_fa] * _limb(fore)
    return out


def to_pixels(joints_frame: np.ndarray) -> np.ndarray:
    scale = (HEIGHT - 2 * CANVAS_MARGIN) / 2.0
    px = np.empty_like(joints_frame)
    px[..., 0] = joints_frame[..., 0] * scale + WIDTH / 2.0
    px[..., 1] = (1.0 - joints_frame[..., 1]) * scale + CANVAS_MARGIN
    return px


_COLS = np.arange(WIDTH) + 0.5
_ROWS = np.arange(HEIGHT) + 0.5


def _capsule(mask: np.ndarray, a: np.ndarray, b: np.ndarray, half_width: float):
    ab = b - a
    denom = float(ab @ ab)
    cx, cy = np.meshgrid(_COLS, _ROWS)
    if denom == 0.0:
        u = np.zeros_like(cx)
    else:
        u = np.clip(((cx - a[0]) * ab[0] + (cy - a[1]) * ab[1]) / denom, 0.0, 1.0)
    dist2 = (cx - a[0] - u * ab[0]) ** 2 + (cy - a[1] - u * ab[1]) ** 2
    mask |= dist2 <= half_width ** 2
    # the centre line itself always lands, so zero-width limbs stay visible
    n = int(np.ceil(np.sqrt(denom) * 4)) + 1
    pts = a + np.linspace(0.0, 1.0, n)[:, None] * ab
    cols = np.floor(pts[:, 0]).astype(int)
    rows = np.floor(pts[:, 1]).astype(int)
    keep = (cols >= 0) & (cols < WIDTH) & (rows >= 0) & (rows < HEIGHT)
    mask[rows[keep], cols[keep]] = True


def render_silhouette(
    joints_frame,
    widths,
    topology: SkeletonTopology = SYNTH13,
    blob: tuple[float, float, float, float] | None = None,
) -> np.ndarray:
    """Rasterize one normalized skeleton frame into a binary 64x44 mask.

    Each edge becomes a capsule of the given half-width in pixels. ``blob`` is
    an optional axis-aligned ellipse ``(cx, cy, rx, ry)`` in pixel units.
    """
    px = to_pixels(np.asarray(joints_frame, dtype=np.float64))
    widths = np.asarray(widths, dtype=np.float64)
    mask = np.zeros((HEIGHT, WIDTH), dtype=bool)
    for e, (p, c) in enumerate(topology.edges):
        _capsule(mask, px[p], px[c], widths[e])
    if blob is not None:
        bx, by, rx, ry = blob
        cx, cy = np.meshgrid(_COLS, _ROWS)
        mask |= ((cx - bx) / rx) ** 2 + ((cy - by) / ry) ** 2 <= 1.0
    return mask.astype(np.uint8)


def generate_walk(
    params: IdentityParams,
    t: int,
    view: str = "090",
    condition: str = "clean",
    seed=0,
    label: int = 0,
    seq: int = 0,
) -> GaitSample:
    if t < 8:
        raise InvalidInputError(f"need at least 8 frames, got {t}")
    if condition not in CONDITIONS:
        raise InvalidInputError(f"unknown condition {condition!r}; expected one of {CONDITIONS}")
    xs = view_scale(view)
    raw = walk_joints(params, np.arange(t))
    raw[..., 0] *= xs
    joints = normalize_skeleton(JointSequence(raw, SYNTH13))

    rng = np.random.default_rng(seed)
    widths = params.widths.copy()
    blob_spec = coat = None
    if condition == "widened-contour":
        widths[_WIDENED_EDGES] = widths[_WIDENED_EDGES] * rng.uniform(2.0, 2.6) + 1.5
        # coat hem hides most of the thigh swing
        coat = (rng.uniform(0.6, 0.9), rng.uniform(6.0, 8.0))
    elif condition == "carried-blob":
        # bag hanging behind the torso, against the walking direction
        blob_spec = (rng.uniform(0.35, 0.6), rng.uniform(5.0, 7.0), rng.uniform(7.0, 10.0))

    frames = np.empty((t, HEIGHT, WIDTH), dtype=np.uint8)
    for f in range(t):
        blob = None
        if blob_spec is not None:
            frac, rx, ry = blob_spec
            px = to_pixels(joints.data[f])
            top, bottom = px[1], px[8]
            centre = top + frac * (bottom - top)
            back = -np.sign(xs) * (widths[_TORSO] + rx * 0.8)
            blob = (centre[0] + back, centre[1], rx, ry)
        frames[f] = render_silhouette(joints.data[f], widths, blob=blob)
        if coat is not None:
            reach, half = coat
            px = to_pixels(joints.data[f])
            hem = px[8] + reach * ((px[9] + px[10]) / 2 - px[8])
            mask = frames[f].astype(bool)
            _capsule(mask, px[8], hem, half)
            frames[f] = mask
    return GaitSample(label=label, condition=condition, view=view, silhouettes=frames,
                      joints=joints, seq=seq)


# --- silhouette archive ----------------------------------------------------------
#
# Binary layout (little endian):
#   magic   4s   b"GSIL"
#   version u16  1
#   pad     u16  0
#   t, H, W u32 x3
#   payload numpy.packbits of the row-major [t][H][W] mask (big bit order),
#           zero-padded to a whole byte

SILHOUETTE_MAGIC = b"GSIL"


def encode_silhouette_archive(frames: np.ndarray) -> bytes:
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise InvalidInputError(f"silhouettes must be [t, H, W], got {frames.shape}")
    t, h, w = frames.shape
    header = SILHOUETTE_MAGIC + struct.pack("<HHIII", 1, 0, t, h, w)
    return header + np.packbits(frames.reshape(-1) != 0).tobytes()


def decode_silhouette_archive(blob: bytes) -> np.ndarray:
    if blob[:4] != SILHOUETTE_MAGIC:
        raise InvalidInputError("not a silhouette archive (bad magic)")
    version, _, t, h, w = struct.unpack_from("<HHIII", blob, 4)
    if version != 1:
        raise InvalidInputError(f"unsupported silhouette archive version {version}")
    n = t * h * w
    if len(blob) - 20 != (n + 7) // 8:
        raise InvalidInputError(f"silhouette payload is {len(blob) - 20} bytes, expected {(n + 7) // 8}")
    bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8, offset=20), count=n)
    return bits.reshape(t, h, w)


def write_silhouette_archive(path, frames) -> Path:
    path = Path(path)
    path.write_bytes(encode_silhouette_archive(frames))
    return path


def read_silhouette_archive(path) -> np.ndarray:
    return decode_silhouette_archive(Path(path).read_bytes())


def split_of(label: int) -> str:
    """Odd 1-based identity indices train, even ones test."""
    return "train" if (label + 1) % 2 == 1 else "test"


def build_dataset(
    out_dir,
    n_ids: int,
    seqs_per_id: int,
    frames: int,
    views=("090",),
    conditions=CONDITIONS,
    seed: int = 0,
) -> Path:
    """Generate a dataset directory and return the path of its manifest.

    Sequence ``s`` of every identity gets ``conditions[s % C]`` and
    ``views[(s // C) % V]``, so ``seqs_per_id = C * V`` enumerates the grid.
    """
    if n_ids < 1 or seqs_per_id < 1 or frames < 1:
        raise InvalidInputError("n_ids, seqs_per_id and frames must all be >= 1")
    views, conditions = list(views), list(conditions)
    if not views or not conditions:
        raise InvalidInputError("need at least one view and one condition")
    for c in conditions:
        if c not in CONDITIONS:
            raise InvalidInputError(f"unknown condition {c!r}")
    for v in views:
        view_scale(v)

    out = Path(out_dir)
    (out / "skeletons").mkdir(parents=True, exist_ok=True)
    (out / "silhouettes").mkdir(parents=True, exist_ok=True)
    records, identities = [], []
    for label in range(n_ids):
        base = sample_identity(np.random.default_rng([seed, label]))
        identities.append({"id": label, "split": split_of(label), **base.to_dict()})
        for s in range(seqs_per_id):
            seq_rng = np.random.default_rng([seed, label, s])
            params = perturb_identity(base, seq_rng)
            cond = conditions[s % len(conditions)]
            view = views[(s // len(conditions)) % len(views)]
            sample = generate_walk(params, frames, view, cond, seed=seq_rng.integers(2**32),
                                   label=label, seq=s)
            stem = f"{label:04d}_{s:02d}"
            skel = Path("skeletons") / f"{stem}.gskl"
            sil = Path("silhouettes") / f"{stem}.gsil"
            write_skeleton_archive(out / skel, sample.joints)
            write_silhouette_archive(out / sil, sample.silhouettes)
            records.append({
                "id": label, "seq": s, "view": view, "condition": cond,
                "split": split_of(label), "frames": frames,
                "skeleton": skel.as_posix(), "silhouette": sil.as_posix(),
            })
    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    (out / "identities.jsonl").write_text(
        "".join(json.dumps(r, sort_keys=True) + "\n" for r in identities)
    )
    return manifest
