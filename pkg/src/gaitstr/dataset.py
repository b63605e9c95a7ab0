"""In-memory view of a generated dataset directory."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .skeleton import JointSequence, read_skeleton_archive, select_frame_indices
from .synthetic import GaitSample, read_silhouette_archive


@dataclass
class GaitDataset:
    samples: list[GaitSample]
    root: Path | None = None

    @classmethod
    def load(cls, path) -> "GaitDataset":
        """Load from a dataset directory or its ``manifest.jsonl``."""
        path = Path(path)
        manifest = path / "manifest.jsonl" if path.is_dir() else path
        if not manifest.exists():
            raise InvalidInputError(f"no manifest at {manifest}")
        root = manifest.parent
        samples = []
        for n, line in enumerate(manifest.read_text().splitlines(), 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            joints = read_skeleton_archive(root / rec["skeleton"])
            if not isinstance(joints, JointSequence):
                raise InvalidInputError(f"{manifest}:{n}: skeleton archive does not hold joints")
            sils = read_silhouette_archive(root / rec["silhouette"])
            samples.append(GaitSample(
                label=int(rec["id"]), condition=rec["condition"], view=rec["view"],
                silhouettes=sils, joints=joints, seq=int(rec["seq"]),
                meta={"split": rec.get("split"), "skeleton": rec["skeleton"],
                      "silhouette": rec["silhouette"]},
            ))
        return cls(samples, root)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i) -> GaitSample:
        return self.samples[i]

    def split(self, name: str) -> "GaitDataset":
        return GaitDataset([s for s in self.samples if s.meta.get("split") == name], self.root)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def identities(self) -> list[int]:
        return sorted(set(self.labels.tolist()))

    def by_identity(self) -> dict[int, list[int]]:
        groups: dict[int, list[int]] = {}
        for i, s in enumerate(self.samples):
            groups.setdefault(s.label, []).append(i)
        return groups


def fit_frames(sample: GaitSample, n: int) -> GaitSample:
    """Center-crop to ``n`` frames, or cycle frames when the sequence is shorter."""
    mode = "center" if sample.num_frames >= n else "repeat"
    idx = select_frame_indices(sample.num_frames, n, mode)
    return GaitSample(
        label=sample.label, condition=sample.condition, view=sample.view,
        silhouettes=sample.silhouettes[idx],
        joints=JointSequence(sample.joints.data[idx], sample.joints.topology),
        seq=sample.seq, meta=sample.meta,
    )
