"""Raster overlays of original and refined skeletons on their silhouettes."""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

from .errors import InvalidInputError
from .skeleton import BoneSequence, JointSequence, bones_to_joints
from .synthetic import HEIGHT, WIDTH, to_pixels

ORIGINAL_COLOR = (40, 90, 220)
REFINED_COLOR = (220, 50, 40)
BACKGROUND = (255, 255, 255)
SILHOUETTE = (200, 200, 200)
GAP = 2


def _as_joints(seq):
    if isinstance(seq, BoneSequence):
        return bones_to_joints(seq, np.zeros((seq.num_frames, 2)))
    if isinstance(seq, JointSequence):
        return seq
    raise InvalidInputError(f"expected a joint or bone sequence, got {type(seq).__name__}")


def _draw_skeleton(draw, joints_frame, topology, color, scale, x0):
    px = to_pixels(joints_frame) * scale
    px[:, 0] += x0
    for p, c in topology.edges:
        draw.line([tuple(px[p]), tuple(px[c])], fill=color, width=max(1, scale // 2))
    r = max(1, scale // 2)
    for x, y in px:
        draw.ellipse([x - r, y - r, x + r, y + r], fill=color)


def render_frame(original, frame: int, refined=None, silhouettes=None, scale: int = 4) -> Image.Image:
    """Three panels (previous, requested, next frame), neighbours clipped at the ends.

    The original skeleton is drawn in blue, the refined one in red, over the
    silhouette when one is given.
    """
    original = _as_joints(original)
    refined = _as_joints(refined) if refined is not None else None
    t = original.num_frames
    if not 0 <= frame < t:
        raise InvalidInputError(f"frame {frame} is out of range for a {t}-frame sequence")
    if refined is not None and refined.num_frames != t:
        raise InvalidInputError(f"refined sequence has {refined.num_frames} frames, original {t}")
    if silhouettes is not None and len(silhouettes) != t:
        raise InvalidInputError(f"silhouettes have {len(silhouettes)} frames, skeleton {t}")
    panels = [max(frame - 1, 0), frame, min(frame + 1, t - 1)]
    pw, ph = WIDTH * scale, HEIGHT * scale
    img = Image.new("RGB", (len(panels) * pw + (len(panels) - 1) * GAP, ph), (0, 0, 0))
    draw = ImageDraw.Draw(img)
    for i, f in enumerate(panels):
        x0 = i * (pw + GAP)
        if silhouettes is not None:
            mask = np.asarray(silhouettes[f], dtype=bool)
            rgb = np.where(mask[..., None], SILHOUETTE, BACKGROUND).astype(np.uint8)
            img.paste(Image.fromarray(rgb).resize((pw, ph), Image.NEAREST), (x0, 0))
        else:
            draw.rectangle([x0, 0, x0 + pw - 1, ph - 1], fill=BACKGROUND)
        _draw_skeleton(draw, original.data[f], original.topology, ORIGINAL_COLOR, scale, x0)
        if refined is not None:
            _draw_skeleton(draw, refined.data[f], refined.topology, REFINED_COLOR, scale, x0)
    return img
